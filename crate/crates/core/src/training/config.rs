// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Plain supervised fine-tuning.
    #[default]
    Sft,
    /// Bilingual passes with first-layer fusion.
    Cc,
}

/// Which training file of a corpus directory is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
    /// Adds the language-A rendering of every language-B record.
    En,
    /// Adds translation instructions.
    Mt,
}

impl Augmentation {
    pub const ALL: [Augmentation; 3] = [Augmentation::None, Augmentation::En, Augmentation::Mt];

    pub fn as_str(self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::En => "en",
            Augmentation::Mt => "mt",
        }
    }

    pub fn train_file(self) -> &'static str {
        match self {
            Augmentation::None => "train.jsonl",
            Augmentation::En => "train.en.jsonl",
            Augmentation::Mt => "train.mt.jsonl",
        }
    }
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Sft => "sft",
            TrainMode::Cc => "cc",
        }
    }
}

macro_rules! display_from_str {
    ($t:ty, $what:literal, [$($v:expr),+]) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                [$($v),+]
                    .into_iter()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| Error::config(format!(concat!("unknown ", $what, " `{}`"), s)))
            }
        }
    };
}

display_from_str!(TrainMode, "training mode", [TrainMode::Sft, TrainMode::Cc]);
display_from_str!(
    Augmentation,
    "augmentation",
    [Augmentation::None, Augmentation::En, Augmentation::Mt]
);

/// Optimization settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub augmentation: Augmentation,
    pub lr: f64,
    pub batch_size: usize,
    /// Step budget when `epochs` is unset.
    pub max_steps: usize,
    /// Full passes over the data; overrides `max_steps` when set.
    pub epochs: Option<usize>,
    pub seed: u64,
    pub warmup_ratio: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Initial scale of the Decision Maker weight.
    pub dm_init_std: f64,
    /// Write `selections.jsonl` during cc training.
    pub log_selections: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Sft,
            augmentation: Augmentation::None,
            lr: 1e-3,
            batch_size: 32,
            max_steps: 2000,
            epochs: None,
            seed: 0,
            warmup_ratio: 0.1,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dm_init_std: 0.02,
            log_selections: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "lr must be finite and ≥ 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("warmup_ratio must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::config(
                "Adam needs betas in [0, 1) and a positive eps",
            ));
        }
        if !(self.grad_clip >= 0.0) || !(self.dm_init_std >= 0.0) {
            return Err(Error::config("grad_clip and dm_init_std must be ≥ 0"));
        }
        Ok(())
    }

    /// Number of optimizer steps for a dataset of `n` records.
    pub fn total_steps(&self, n: usize) -> usize {
        match self.epochs {
            Some(e) => e * n.div_ceil(self.batch_size),
            None => self.max_steps,
        }
    }

    /// Linear warmup over the first `warmup_ratio` of training, then
    /// linear decay to zero.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lr;
        }
        let warm = (self.warmup_ratio * total as f64).ceil() as usize;
        if step < warm {
            self.lr * (step + 1) as f64 / warm as f64
        } else {
            let rest = (total - warm).max(1) as f64;
            self.lr * (1.0 - (step - warm) as f64 / rest).max(0.0)
        }
    }
}

/// Parses a TOML document into any of the config sections, rejecting
/// unknown keys.
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    toml::from_str(text)
        .map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))
}
