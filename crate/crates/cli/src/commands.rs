//! Pipeline stages. Each stage reads the files of the previous one from the
//! output directory and writes its own.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use collapse_core::collapse_rank::{
    build_graph, build_graph_thresholded, greedy_oracle_order, neumann_tail_bound,
    neumann_terms_for, pagerank_direct, pagerank_neumann, pagerank_power, teleport_vector,
    CollapseRanking, RankMethod,
};
use collapse_core::export;
use collapse_core::mask_learner::{train, SelectionMaskSet};
use collapse_core::order_eval::{
    compare_orders, masked_classifier_eval, mean_random_prefix_entropies, planted_class_pair,
    rate_grid,
};
use collapse_core::{CollapseError, GaussianModel, PatchField};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, NamedOrder, Stage};
use crate::error::{CliError, CliResult};

pub const MODEL_FILE: &str = "model.json";
pub const FIELDS_FILE: &str = "fields.json";
pub const MASKS_CSV: &str = "masks.csv";
pub const MASKS_JSON: &str = "masks.json";
pub const TRAIN_REPORT: &str = "train_report.csv";
pub const GRAPH_CSV: &str = "graph.csv";
pub const GRAPH_JSON: &str = "graph.json";
pub const RANKING_CSV: &str = "ranking.csv";
pub const AGREEMENT_JSON: &str = "agreement.json";
pub const ORDERING_CSV: &str = "ordering_report.csv";
pub const ORDERING_JSON: &str = "ordering_summary.json";
pub const ORDER_CHECKS_JSON: &str = "order_checks.json";
pub const CURVES_CSV: &str = "curves.csv";
pub const CURVES_JSON: &str = "curves.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub files: Vec<String>,
    pub stage_seconds: BTreeMap<String, f64>,
}

/// Writes files into the output directory and remembers their names.
struct Output<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl<'a> Output<'a> {
    fn new(dir: &'a Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Output {
            dir,
            written: Vec::new(),
        })
    }

    fn write(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> collapse_core::Result<()>,
    ) -> CliResult<()> {
        let path = self.dir.join(name);
        let io_err = |source| CliError::Io {
            path: path.clone(),
            source,
        };
        let mut w = BufWriter::new(File::create(&path).map_err(io_err)?);
        f(&mut w)?;
        w.flush().map_err(io_err)?;
        self.written.push(name.to_owned());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn read_json<T: DeserializeOwned>(dir: &Path, name: &str) -> CliResult<T> {
    let path = dir.join(name);
    serde_json::from_reader(open(&path)?).map_err(|e| CliError::Read {
        path,
        source: CollapseError::from(e),
    })
}

fn read_model(dir: &Path) -> CliResult<GaussianModel> {
    read_json(dir, MODEL_FILE)
}

fn update_manifest(
    config: &ExperimentConfig,
    stage: Stage,
    seconds: f64,
    written: Vec<String>,
) -> CliResult<()> {
    let dir = &config.out_dir;
    let path = dir.join(MANIFEST);
    let mut manifest: RunManifest = if path.exists() {
        read_json(dir, MANIFEST)?
    } else {
        RunManifest::default()
    };
    manifest.version = format!("collapse {}", env!("CARGO_PKG_VERSION"));
    manifest.config_hash = config.hash();
    manifest.master_seed = config.master_seed;
    manifest
        .stage_seeds
        .insert(stage.name().to_owned(), config.stage_seed(stage));
    manifest
        .stage_seconds
        .insert(stage.name().to_owned(), seconds);
    manifest.files.extend(written);
    manifest.files.push(MANIFEST.to_owned());
    manifest.files.sort();
    manifest.files.dedup();
    manifest
        .files
        .retain(|f| f == MANIFEST || dir.join(f).exists());
    let mut out = Output::new(dir)?;
    out.json(MANIFEST, &manifest)
}

fn run_stage(
    config: &ExperimentConfig,
    stage: Stage,
    body: impl FnOnce(&mut Output) -> CliResult<()>,
) -> CliResult<()> {
    let start = Instant::now();
    let mut out = Output::new(&config.out_dir)?;
    body(&mut out)?;
    let written = out.written;
    update_manifest(config, stage, start.elapsed().as_secs_f64(), written)
}

pub fn build_field(config: &ExperimentConfig) -> CliResult<()> {
    run_stage(config, Stage::BuildField, |out| {
        let m = &config.model;
        let model = GaussianModel::build(&m.structure, m.n_patches, m.patch_dim)?;
        let fields: Vec<PatchField> =
            model.sample_batch(m.n_samples, config.stage_seed(Stage::BuildField));
        out.json(MODEL_FILE, &model)?;
        out.json(FIELDS_FILE, &fields)
    })
}

pub fn learn_masks(config: &ExperimentConfig) -> CliResult<()> {
    run_stage(config, Stage::LearnMasks, |out| {
        let model = read_model(&config.out_dir)?;
        let train_config = config
            .train
            .to_train_config(config.stage_seed(Stage::LearnMasks));
        let outcome = train(&model, &train_config)?;
        out.write(MASKS_CSV, |w| export::write_masks_csv(w, &outcome.masks))?;
        out.json(MASKS_JSON, &outcome.masks)?;
        out.write(TRAIN_REPORT, |w| {
            export::write_train_report_csv(w, &outcome.reports, config.train.record_timing)
        })
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Agreement {
    /// Largest entrywise score difference between any two methods.
    pub max_disagreement: f64,
    pub orders_identical: bool,
    pub power_iterations: usize,
    pub neumann_terms: usize,
    pub neumann_tail_bound: f64,
    pub residuals: BTreeMap<String, f64>,
}

pub fn rank(config: &ExperimentConfig) -> CliResult<()> {
    run_stage(config, Stage::Rank, |out| {
        let dir = &config.out_dir;
        let masks: SelectionMaskSet = read_json(dir, MASKS_JSON)?;
        let model = read_model(dir)?;
        let g = &config.graph;
        let teleport = teleport_vector(g.teleport, &model)?;
        let graph = match g.threshold {
            Some(t) => build_graph_thresholded(&masks, g.damping, teleport.as_deref(), t)?,
            None => build_graph(&masks, g.damping, teleport.as_deref())?,
        };
        let terms = neumann_terms_for(g.damping, g.neumann_tol);
        let rankings = [
            pagerank_power(&graph, g.power_tol, g.max_iter)?,
            pagerank_neumann(&graph, terms),
            pagerank_direct(&graph)?,
        ];
        let mut max_disagreement = 0.0f64;
        for a in &rankings {
            for b in &rankings {
                for (x, y) in a.scores.iter().zip(&b.scores) {
                    max_disagreement = max_disagreement.max((x - y).abs());
                }
            }
        }
        let agreement = Agreement {
            max_disagreement,
            orders_identical: rankings.iter().all(|r| r.order == rankings[2].order),
            power_iterations: rankings[0].iterations,
            neumann_terms: terms,
            neumann_tail_bound: neumann_tail_bound(g.damping, terms),
            residuals: rankings
                .iter()
                .map(|r| (r.method.to_string(), r.residual))
                .collect(),
        };
        out.write(GRAPH_CSV, |w| export::write_graph_csv(w, &graph))?;
        out.write(GRAPH_JSON, |w| export::write_graph_meta_json(w, &graph))?;
        out.write(RANKING_CSV, |w| export::write_ranking_csv(w, &rankings))?;
        out.json(AGREEMENT_JSON, &agreement)
    })
}

fn read_ranking(dir: &Path) -> CliResult<CollapseRanking> {
    let path = dir.join(RANKING_CSV);
    export::read_ranking_csv(open(&path)?, RankMethod::Direct)
        .map_err(|source| CliError::Read { path, source })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderChecks {
    /// Greedy prefix entropy is at most the descending order's everywhere.
    pub greedy_le_descending: Option<bool>,
    /// Descending prefix entropy is at most the random-order mean everywhere.
    pub descending_le_random_mean: Option<bool>,
    /// Descending is at most ascending at the midpoint prefix.
    pub descending_le_ascending_at_midpoint: Option<bool>,
}

const CHECK_TOL: f64 = 1e-9;

fn order_checks(reports: &[collapse_core::OrderingReport]) -> OrderChecks {
    let find = |name: &str| {
        reports
            .iter()
            .find(|r| r.ordering_name == name)
            .map(|r| r.prefix_entropies.clone())
    };
    let le = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| *x <= y + CHECK_TOL);
    let desc = find("descending");
    let asc = find("ascending");
    let greedy = find("greedy");
    let random = mean_random_prefix_entropies(reports);
    OrderChecks {
        greedy_le_descending: greedy.as_ref().zip(desc.as_ref()).map(|(g, d)| le(g, d)),
        descending_le_random_mean: desc.as_ref().zip(random.as_ref()).map(|(d, r)| le(d, r)),
        descending_le_ascending_at_midpoint: desc.as_ref().zip(asc.as_ref()).map(|(d, a)| {
            let mid = d.len() / 2 - 1;
            d[mid] <= a[mid] + CHECK_TOL
        }),
    }
}

pub fn evaluate(config: &ExperimentConfig) -> CliResult<()> {
    run_stage(config, Stage::Evaluate, |out| {
        let dir = &config.out_dir;
        let model = read_model(dir)?;
        let ranking = read_ranking(dir)?;
        if ranking.n() != model.n_patches() {
            return Err(CliError::Read {
                path: dir.join(RANKING_CSV),
                source: CollapseError::DimensionMismatch {
                    expected: model.n_patches(),
                    got: ranking.n(),
                },
            });
        }
        let e = &config.eval;
        let seed = config.stage_seed(Stage::Evaluate);

        let mut named = Vec::new();
        for order in &e.orders {
            let (name, perm) = match order {
                NamedOrder::Descending => ("descending", ranking.order.clone()),
                NamedOrder::Ascending => ("ascending", ranking.ascending()),
                NamedOrder::Greedy => ("greedy", greedy_oracle_order(&model)?.order),
            };
            named.push((name.to_owned(), perm));
        }
        let reports = compare_orders(&model, &named, e.n_random, e.n_fields, seed)?;
        out.write(ORDERING_CSV, |w| export::write_ordering_csv(w, &reports))?;
        out.write(ORDERING_JSON, |w| {
            export::write_ordering_summary_json(w, &reports)
        })?;
        out.json(ORDER_CHECKS_JSON, &order_checks(&reports))?;

        let (m0, m1) = planted_class_pair(
            &model,
            &ranking.order[..e.signal_patches],
            e.signal_strength,
        )?;
        let rates = rate_grid(e.rate_points, e.max_rate);
        let eval =
            masked_classifier_eval((&m0, &m1), &ranking, &e.classifier_config(seed), &rates)?;
        if eval.degenerate {
            eprintln!("warning: classifier accuracy near chance at the lowest rate; curves are not informative");
        }
        out.write(CURVES_CSV, |w| export::write_curves_csv(w, &eval))?;
        out.json(CURVES_JSON, &export::curves_summary(&eval, 1))
    })
}

pub fn all(config: &ExperimentConfig) -> CliResult<()> {
    build_field(config)?;
    learn_masks(config)?;
    rank(config)?;
    evaluate(config)
}
