//! TOML run configuration shared by the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SchemaSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::BinaryOpKind;
use crate::search::{OptimizerKind, TrainConfig};

/// Top-level configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub search: SearchSection,
}

fn default_model() -> ModelConfig {
    ModelConfig::full()
}

/// Where the data comes from and how tasks are built.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Support-set size; `0` selects the random half/half mode instead.
    #[serde(default = "default_support")]
    pub support_size: usize,
    #[serde(default = "default_min_history")]
    pub min_history: usize,
    #[serde(default = "default_max_history")]
    pub max_history: usize,
    /// Train/val/test fractions over users.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// When set, tasks with history length in `[head[0], head[1])` bypass
    /// the ratio split and go straight to train.
    #[serde(default)]
    pub long_tail_head: Option<[usize; 2]>,
    #[serde(default)]
    pub seed: u64,
}

fn default_support() -> usize {
    20
}
fn default_min_history() -> usize {
    40
}
fn default_max_history() -> usize {
    200
}
fn default_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

/// Supported data sources.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// The `::`-delimited three-file layout.
    Movielens {
        ratings: PathBuf,
        users: PathBuf,
        movies: PathBuf,
    },
    /// A headered CSV plus a column-role mapping.
    Csv { path: PathBuf, schema: SchemaSpec },
    /// Generated data with a planted modulation structure.
    Synthetic {
        /// Op names applied in order, e.g. `["mul", "add"]`.
        planted: Vec<String>,
        n_users: usize,
        n_items: usize,
        #[serde(default)]
        noise_sd: f64,
    },
}

/// Structure-search settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    /// Number of (layer, op) pairs kept after supernet training.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Alternate weight steps on train batches with blend-weight steps on
    /// validation batches.
    #[serde(default)]
    pub bilevel: bool,
    /// Candidate budget for the random-search strategies.
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Chain length per layer when sampling the original space.
    #[serde(default = "default_ops_per_layer")]
    pub ops_per_layer: usize,
    /// Epochs per random-search candidate.
    #[serde(default = "default_candidate_epochs")]
    pub candidate_epochs: usize,
}

fn default_top_k() -> usize {
    4
}
fn default_budget() -> usize {
    20
}
fn default_ops_per_layer() -> usize {
    2
}
fn default_candidate_epochs() -> usize {
    5
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            top_k: default_top_k(),
            bilevel: false,
            budget: default_budget(),
            ops_per_layer: default_ops_per_layer(),
            candidate_epochs: default_candidate_epochs(),
        }
    }
}

/// Parse an op token: symbol or name, unicode or ASCII.
pub fn parse_op(token: &str) -> Result<BinaryOpKind> {
    match token.trim().to_lowercase().as_str() {
        "max" => Ok(BinaryOpKind::Max),
        "min" => Ok(BinaryOpKind::Min),
        "mul" | "*" | "⊙" | "x" => Ok(BinaryOpKind::Mul),
        "div" | "/" => Ok(BinaryOpKind::Div),
        "add" | "+" => Ok(BinaryOpKind::Add),
        "sub" | "-" => Ok(BinaryOpKind::Sub),
        other => Err(Error::Parse(format!("unknown op '{other}'"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let d = &self.dataset;
        if d.min_history > d.max_history {
            return Err(Error::Config(format!(
                "min_history {} exceeds max_history {}",
                d.min_history, d.max_history
            )));
        }
        if (d.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || d.split.iter().any(|&r| r <= 0.0) {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {:?}",
                d.split
            )));
        }
        if let DataSource::Synthetic {
            planted,
            n_users,
            n_items,
            noise_sd,
        } = &d.source
        {
            for op in planted {
                parse_op(op).map_err(|e| Error::Config(e.to_string()))?;
            }
            if *n_users == 0 || *n_items == 0 {
                return Err(Error::Config("synthetic data needs users and items".into()));
            }
            if *noise_sd < 0.0 {
                return Err(Error::Config("noise_sd must be >= 0".into()));
            }
        }
        let s = &self.search;
        if s.top_k == 0 || s.top_k > 4 * self.model.widths.len() {
            return Err(Error::Config(format!(
                "top_k must be in 1..={}, got {}",
                4 * self.model.widths.len(),
                s.top_k
            )));
        }
        if s.budget == 0 || s.ops_per_layer == 0 || s.candidate_epochs == 0 {
            return Err(Error::Config(
                "search budget, ops_per_layer and candidate_epochs must be positive".into(),
            ));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config(
                "train epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.train.lr)));
        }
        Ok(())
    }

    /// A complete example configuration, used by `init` style tooling and
    /// tests.
    pub fn example_synthetic() -> Self {
        RunConfig {
            dataset: DatasetConfig {
                source: DataSource::Synthetic {
                    planted: vec!["mul".into(), "add".into()],
                    n_users: 60,
                    n_items: 200,
                    noise_sd: 0.05,
                },
                support_size: 10,
                min_history: 20,
                max_history: 200,
                split: [0.7, 0.1, 0.2],
                long_tail_head: None,
                seed: 0,
            },
            model: ModelConfig {
                emb_dim: 8,
                adapt_hidden: 32,
                widths: vec![16, 8, 1],
            },
            train: TrainConfig {
                epochs: 20,
                batch_size: 16,
                lr: 5e-3,
                alpha_lr: 0.05,
                alpha_penalty: 0.0,
                optimizer: OptimizerKind::Adam,
                patience: 5,
                min_delta: 1e-4,
                rng_seed: 0,
            },
            search: SearchSection::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn example_round_trips_through_toml() {
        let cfg = RunConfig::example_synthetic();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, &text).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(toml::to_string_pretty(&loaded).unwrap(), text);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let text = r#"
            [dataset]
            seed = 3
            [dataset.source]
            kind = "synthetic"
            planted = ["max", "add"]
            n_users = 30
            n_items = 100
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.dataset.support_size, 20);
        assert_eq!(cfg.dataset.split, [0.7, 0.1, 0.2]);
        assert_eq!(cfg.model.widths, vec![128, 64, 32, 1]);
        assert_eq!(cfg.search.top_k, 4);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"
            [dataset]
            typo_field = 1
            [dataset.source]
            kind = "synthetic"
            planted = ["add"]
            n_users = 10
            n_items = 10
        "#;
        assert!(toml::from_str::<RunConfig>(text).is_err());
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = RunConfig::example_synthetic();
        cfg.dataset.split = [0.5, 0.5, 0.5];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::example_synthetic();
        cfg.search.top_k = 99;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::example_synthetic();
        cfg.dataset.source = DataSource::Synthetic {
            planted: vec!["bogus".into()],
            n_users: 5,
            n_items: 5,
            noise_sd: 0.0,
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn op_tokens() {
        assert_eq!(parse_op("⊙").unwrap(), BinaryOpKind::Mul);
        assert_eq!(parse_op(" MAX ").unwrap(), BinaryOpKind::Max);
        assert_eq!(parse_op("-").unwrap(), BinaryOpKind::Sub);
        assert!(parse_op("pow").is_err());
    }
}
