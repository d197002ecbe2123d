//! Experiment configuration: TOML file, dotted `key=value` overrides, and
//! per-stage seed derivation.

use std::path::{Path, PathBuf};

use collapse_core::collapse_rank::TeleportMode;
use collapse_core::mask_learner::TrainConfig;
use collapse_core::order_eval::ClassifierConfig;
use collapse_core::{seed, StructureSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub structure: StructureSpec,
    pub n_patches: usize,
    pub patch_dim: usize,
    /// Fields written to `fields.json`.
    pub n_samples: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            structure: StructureSpec::star(0, 0.24),
            n_patches: 16,
            patch_dim: 1,
            n_samples: 256,
        }
    }
}

/// Mask-learning settings; the seed comes from the top-level
/// `master_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sigma: f64,
    pub lambda_c: f64,
    pub tau: f64,
    pub ridge_lambda: f64,
    /// Write wall-clock seconds into the train report instead of 0.
    pub record_timing: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            sigma: t.sigma,
            lambda_c: t.lambda_c,
            tau: t.tau,
            ridge_lambda: t.ridge_lambda,
            record_timing: false,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, master_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            sigma: self.sigma,
            lambda_c: self.lambda_c,
            tau: self.tau,
            ridge_lambda: self.ridge_lambda,
            master_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    pub damping: f64,
    pub teleport: TeleportMode,
    /// Zero mask entries below this before normalizing (ablation only).
    pub threshold: Option<f64>,
    pub power_tol: f64,
    pub max_iter: usize,
    /// Bound on the truncated Neumann tail.
    pub neumann_tol: f64,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            damping: 0.85,
            teleport: TeleportMode::Uniform,
            threshold: None,
            power_tol: 1e-14,
            max_iter: 100_000,
            neumann_tol: 1e-12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedOrder {
    Descending,
    Ascending,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub orders: Vec<NamedOrder>,
    pub n_random: usize,
    /// Monte Carlo fields for the sequential prediction error.
    pub n_fields: usize,
    pub rate_points: usize,
    pub max_rate: f64,
    /// Class signal is planted on this many top-ranked patches.
    pub signal_patches: usize,
    /// Mean shift in marginal standard deviations.
    pub signal_strength: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        EvalSection {
            orders: vec![
                NamedOrder::Descending,
                NamedOrder::Ascending,
                NamedOrder::Greedy,
            ],
            n_random: 100,
            n_fields: 200,
            rate_points: 34,
            max_rate: 0.99,
            signal_patches: 4,
            signal_strength: 1.0,
            n_train: c.n_train,
            n_test: c.n_test,
            epochs: c.epochs,
            lr: c.lr,
            l2: c.l2,
        }
    }
}

impl EvalSection {
    pub fn classifier_config(&self, seed: u64) -> ClassifierConfig {
        ClassifierConfig {
            n_train: self.n_train,
            n_test: self.n_test,
            epochs: self.epochs,
            lr: self.lr,
            l2: self.l2,
            max_rate: self.max_rate,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub train: TrainSection,
    pub graph: GraphSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            out_dir: PathBuf::from("out"),
            model: ModelSection::default(),
            train: TrainSection::default(),
            graph: GraphSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Pipeline stages; each gets its own seed stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    BuildField,
    LearnMasks,
    Rank,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::BuildField => "build-field",
            Stage::LearnMasks => "learn-masks",
            Stage::Rank => "rank",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl ExperimentConfig {
    /// Layers `path` over the defaults, applies `key=value` overrides, then
    /// `seed` and `out`.
    pub fn load(
        path: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
        out: Option<&Path>,
    ) -> CliResult<Self> {
        let mut doc = toml::Table::try_from(ExperimentConfig::default())
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            let file = text
                .parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            merge(&mut doc, file);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut config: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_owned()))?;
        if let Some(s) = seed {
            config.master_seed = s;
        }
        if let Some(o) = out {
            config.out_dir = o.to_path_buf();
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        let m = &self.model;
        self.model
            .structure
            .edges(m.n_patches)
            .map_err(|e| CliError::Config(format!("model.structure: {e}")))?;
        self.train
            .to_train_config(0)
            .validate(m.n_patches, m.patch_dim)
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        let g = &self.graph;
        if !(g.damping > 0.0 && g.damping < 1.0) {
            return Err(CliError::Config(format!(
                "graph.damping must lie in (0, 1), got {}",
                g.damping
            )));
        }
        if !(g.power_tol > 0.0 && g.neumann_tol > 0.0) {
            return Err(CliError::Config("graph tolerances must be positive".into()));
        }
        let e = &self.eval;
        if e.n_fields == 0 || e.rate_points < 3 || e.n_train == 0 || e.n_test == 0 {
            return Err(CliError::Config(
                "eval.n_fields, n_train and n_test must be positive and rate_points at least 3"
                    .into(),
            ));
        }
        if !(e.max_rate > 0.0 && e.max_rate <= 0.99) {
            return Err(CliError::Config(format!(
                "eval.max_rate must lie in (0, 0.99], got {}",
                e.max_rate
            )));
        }
        if e.signal_patches == 0 || e.signal_patches > m.n_patches {
            return Err(CliError::Config(format!(
                "eval.signal_patches must lie in 1..={}",
                m.n_patches
            )));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        seed::derive_seed(self.master_seed, stage.name())
    }

    /// SHA-256 over the JSON form of everything except `out_dir`.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Recursively overlays `top` onto `base`; tables merge, other values
/// replace.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Sets a dotted path such as `train.lambda_c=0.1`. The value is read as a
/// TOML literal, falling back to a bare string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override key `{key}`: `{part}` is not a table"))
        })?;
    }
    table.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_parse_values() {
        let mut doc = toml::Table::try_from(ExperimentConfig::default()).unwrap();
        apply_override(&mut doc, "train.lambda_c=0.5").unwrap();
        apply_override(&mut doc, "model.structure.kind=chain").unwrap();
        apply_override(&mut doc, "master_seed = 7").unwrap();
        let c: ExperimentConfig = toml::Value::Table(doc).try_into().unwrap();
        assert_eq!(c.train.lambda_c, 0.5);
        assert_eq!(c.model.structure.kind, collapse_core::StructureKind::Chain);
        assert_eq!(c.model.structure.coupling, 0.24);
        assert_eq!(c.master_seed, 7);
        assert!(apply_override(&mut toml::Table::new(), "novalue").is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::load(None, &["train.lamda_c=0.1".into()], None, None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("lamda_c"), "{err}");
    }

    #[test]
    fn shipped_config_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        let loaded = ExperimentConfig::load(Some(&path), &[], None, None).unwrap();
        assert_eq!(loaded, ExperimentConfig::default());
    }

    #[test]
    fn hash_ignores_out_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.train.lambda_c = 0.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn stage_seeds_differ() {
        let c = ExperimentConfig::default();
        assert_ne!(
            c.stage_seed(Stage::BuildField),
            c.stage_seed(Stage::LearnMasks)
        );
    }
}
