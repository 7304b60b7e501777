// SPDX-License-Identifier: MIT OR Apache-2.0

//! One TOML document configuring every stage of an experiment. Each
//! section is optional and falls back to its defaults; unknown keys are
//! rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::connection::ConnectionConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::training::{parse_toml, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    /// Parallel pairs sampled for the fit.
    pub bank_size: usize,
    /// Ridge strength; 0 means plain normal equations with the automatic
    /// fallback.
    pub lambda: f64,
    pub curve_sizes: Vec<usize>,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            bank_size: 1000,
            lambda: 0.0,
            curve_sizes: vec![10, 50, 100, 500, 1000],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub connection: ConnectionConfig,
    pub train: TrainConfig,
    pub transform: TransformConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let cfg: Self = parse_toml(&fs::read_to_string(path)?, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.connection.validate()?;
        self.train.validate()?;
        if self.transform.bank_size == 0 || !(self.transform.lambda >= 0.0) {
            return Err(Error::config(
                "transform.bank_size must be positive and lambda ≥ 0",
            ));
        }
        Ok(())
    }

    /// Points every stochastic stage at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    /// Reseeds model initialization and training only, keeping the data.
    pub fn with_run_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_default_and_unknown_keys_fail() {
        let text = "[train]\nlr = 0.001\n[connection]\nsite = \"attn\"\n";
        let cfg: ExperimentConfig = parse_toml(text, Path::new("c.toml")).unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.connection.site, crate::model::Site::Attn);
        assert_eq!(cfg.model, ModelConfig::default());
        assert!(
            parse_toml::<ExperimentConfig>("[model]\nwidth = 3\n", Path::new("c.toml")).is_err()
        );
        assert!(parse_toml::<ExperimentConfig>("[nonsense]\n", Path::new("c.toml")).is_err());
    }

    #[test]
    fn seeding_touches_every_stage() {
        let c = ExperimentConfig::default().with_seed(9);
        assert_eq!(
            (c.corpus.seed, c.model.seed, c.train.seed, c.eval.seed),
            (9, 9, 9, 9)
        );
        let r = ExperimentConfig::default().with_run_seed(4);
        assert_eq!((r.corpus.seed, r.model.seed), (0, 4));
    }
}
