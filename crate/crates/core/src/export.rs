//! CSV and JSON interchange for masks, reports, rankings, graphs and curves.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::collapse_rank::{CollapseRanking, DependencyGraph, RankMethod};
use crate::error::{CollapseError, Result};
use crate::mask_learner::{SelectionMaskSet, TrainReport};
use crate::order_eval::{ClassifierEval, OrderingReport};

fn matrix_header(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|j| format!("{prefix}{j}")).collect()
}

fn write_matrix<W: Write>(writer: W, prefix: &str, m: &DMatrix<f64>) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(matrix_header(prefix, m.ncols()))?;
    for row in m.row_iter() {
        out.write_record(row.iter().map(|v| v.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

fn read_matrix<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut input = csv::Reader::from_reader(reader);
    let cols = input.headers()?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for record in input.records() {
        let record = record?;
        if record.len() != cols {
            return Err(CollapseError::Malformed(format!(
                "row {rows} has {} columns, expected {cols}",
                record.len()
            )));
        }
        for field in record.iter() {
            values.push(parse_f64(field)?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn parse_f64(field: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| CollapseError::Malformed(format!("not a number: `{field}`")))
}

/// `N` rows by `N` columns (`w_0 .. w_{N-1}`); row `i` is target `i`.
pub fn write_masks_csv<W: Write>(writer: W, masks: &SelectionMaskSet) -> Result<()> {
    write_matrix(writer, "w_", masks.weights())
}

pub fn read_masks_csv<R: Read>(reader: R, sigma: f64) -> Result<SelectionMaskSet> {
    let w = read_matrix(reader)?;
    if !w.is_square() {
        return Err(CollapseError::Malformed(format!(
            "mask matrix is {}x{}, expected square",
            w.nrows(),
            w.ncols()
        )));
    }
    SelectionMaskSet::from_weights(w, sigma)
}

pub const TRAIN_REPORT_COLUMNS: [&str; 5] = [
    "epoch",
    "recon_loss",
    "contrastive_loss",
    "mask_entropy",
    "seconds",
];

/// Columns `epoch, recon_loss, contrastive_loss, mask_entropy, seconds`.
/// With `with_timing = false` the seconds column is written as 0 so the
/// file depends only on the seed.
pub fn write_train_report_csv<W: Write>(
    writer: W,
    reports: &[TrainReport],
    with_timing: bool,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(TRAIN_REPORT_COLUMNS)?;
    for r in reports {
        let seconds = if with_timing { r.seconds } else { 0.0 };
        out.write_record([
            r.epoch.to_string(),
            r.recon_loss.to_string(),
            r.contrastive_loss.to_string(),
            r.mask_entropy.to_string(),
            seconds.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_train_report_csv<R: Read>(reader: R) -> Result<Vec<TrainReport>> {
    let mut input = csv::Reader::from_reader(reader);
    let headers: Vec<String> = input.headers()?.iter().map(str::to_owned).collect();
    if headers != TRAIN_REPORT_COLUMNS {
        return Err(CollapseError::Malformed(format!(
            "train report columns {headers:?}, expected {TRAIN_REPORT_COLUMNS:?}"
        )));
    }
    input
        .deserialize()
        .map(|r| r.map_err(CollapseError::from))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct RankingRow {
    patch_index: usize,
    score: f64,
    rank: usize,
    method: String,
}

/// Columns `patch_index, score, rank, method`; one block per ranking.
pub fn write_ranking_csv<W: Write>(writer: W, rankings: &[CollapseRanking]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for ranking in rankings {
        let ranks = ranking.ranks();
        for (p, &score) in ranking.scores.iter().enumerate() {
            out.serialize(RankingRow {
                patch_index: p,
                score,
                rank: ranks[p],
                method: ranking.method.to_string(),
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the block for `method`. Iteration count and residual are not
/// stored in the CSV and come back as zero.
pub fn read_ranking_csv<R: Read>(reader: R, method: RankMethod) -> Result<CollapseRanking> {
    let mut input = csv::Reader::from_reader(reader);
    let mut rows: Vec<RankingRow> = Vec::new();
    for row in input.deserialize() {
        let row: RankingRow = row?;
        if row.method.parse::<RankMethod>()? == method {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(CollapseError::Malformed(format!(
            "no `{method}` ranking rows"
        )));
    }
    let n = rows.len();
    let mut scores = vec![f64::NAN; n];
    for row in &rows {
        if row.patch_index >= n || !scores[row.patch_index].is_nan() {
            return Err(CollapseError::Malformed(format!(
                "bad or repeated patch index {} in `{method}` ranking",
                row.patch_index
            )));
        }
        scores[row.patch_index] = row.score;
    }
    let ranking = CollapseRanking::from_scores(scores, method, 0, 0.0);
    let ranks = ranking.ranks();
    if rows.iter().any(|r| ranks[r.patch_index] != r.rank) {
        return Err(CollapseError::Malformed(format!(
            "`{method}` rank column disagrees with scores"
        )));
    }
    Ok(ranking)
}

/// Dense adjacency, `a_0 .. a_{N-1}` columns.
pub fn write_graph_csv<W: Write>(writer: W, graph: &DependencyGraph) -> Result<()> {
    write_matrix(writer, "a_", graph.adjacency())
}

pub fn write_graph_meta_json<W: Write>(writer: W, graph: &DependencyGraph) -> Result<()> {
    serde_json::to_writer_pretty(writer, &graph.meta())?;
    Ok(())
}

/// Columns `ordering, prefix_len, H_c, l1`. Row `k` holds `H_c` after the
/// first `k` patches and the mean L1 error predicting the `k`-th patch.
pub fn write_ordering_csv<W: Write>(writer: W, reports: &[OrderingReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["ordering", "prefix_len", "H_c", "l1"])?;
    for r in reports {
        for (k, (h, l1)) in r.prefix_entropies.iter().zip(&r.position_l1).enumerate() {
            out.write_record([
                r.ordering_name.clone(),
                (k + 1).to_string(),
                h.to_string(),
                l1.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingSummary {
    pub ordering: String,
    pub sequential_l1: f64,
    pub sequential_l1_se: f64,
    pub seeds: usize,
}

pub fn write_ordering_summary_json<W: Write>(writer: W, reports: &[OrderingReport]) -> Result<()> {
    let summary: Vec<OrderingSummary> = reports
        .iter()
        .map(|r| OrderingSummary {
            ordering: r.ordering_name.clone(),
            sequential_l1: r.sequential_l1,
            sequential_l1_se: r.sequential_l1_se,
            seeds: r.seeds,
        })
        .collect();
    serde_json::to_writer_pretty(writer, &summary)?;
    Ok(())
}

/// Columns `curve, rate, accuracy` for the collapse and random curves.
pub fn write_curves_csv<W: Write>(writer: W, eval: &ClassifierEval) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["curve", "rate", "accuracy"])?;
    for (name, curve) in [("collapse", &eval.collapse), ("random", &eval.random)] {
        for (rate, acc) in curve.rates.iter().zip(&curve.accuracy) {
            out.write_record([name.to_string(), rate.to_string(), acc.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub auc: f64,
    pub knee_rate: f64,
    pub knee_found: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvesSummary {
    pub collapse: CurveSummary,
    pub random: CurveSummary,
    pub degenerate: bool,
    pub seeds: usize,
}

pub fn curves_summary(eval: &ClassifierEval, seeds: usize) -> CurvesSummary {
    let summary = |c: &crate::order_eval::MaskRateCurve| CurveSummary {
        auc: c.auc,
        knee_rate: c.knee_rate,
        knee_found: c.knee_found,
    };
    CurvesSummary {
        collapse: summary(&eval.collapse),
        random: summary(&eval.random),
        degenerate: eval.degenerate,
        seeds,
    }
}
