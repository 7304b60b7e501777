// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the embedding-side feature fed to the Decision Maker is pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingPooling {
    /// Embedding-layer output at the tap position.
    #[default]
    Tap,
    /// Mean embedding-layer output over the prompt up to the tap position.
    Mean,
}

/// Shape of the toy decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Response start token, the `[output]` marker of the template.
    pub rst_token_id: usize,
    pub eos_token_id: usize,
    pub seed: u64,
    pub init_std: f64,
    pub ln_eps: f64,
    pub embedding_pooling: EmbeddingPooling,
}

fn default_init_std() -> f64 {
    0.02
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            vocab_size: 256,
            max_seq_len: 32,
            rst_token_id: crate::corpus::RST,
            eos_token_id: crate::corpus::EOS,
            seed: 0,
            init_std: default_init_std(),
            ln_eps: default_ln_eps(),
            embedding_pooling: EmbeddingPooling::Tap,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::config("n_layers must be at least 2"));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn == 0 || self.max_seq_len == 0 {
            return Err(Error::config("d_ffn and max_seq_len must be positive"));
        }
        if self.rst_token_id >= self.vocab_size || self.eos_token_id >= self.vocab_size {
            return Err(Error::config("rst/eos token ids must be below vocab_size"));
        }
        if !(self.init_std > 0.0 && self.ln_eps > 0.0) {
            return Err(Error::config("init_std and ln_eps must be positive"));
        }
        Ok(())
    }

    /// Exact number of model parameters (excluding the Decision Maker).
    pub fn param_count(&self) -> usize {
        let (v, d, f, s, l) = (
            self.vocab_size,
            self.d_model,
            self.d_ffn,
            self.max_seq_len,
            self.n_layers,
        );
        let per_layer = 2 * d + 4 * d * d + 2 * d + 2 * d * f;
        v * d + s * d + l * per_layer + 2 * d + d * v
    }

    /// Entries in the `d×L` Decision Maker matrix.
    pub fn decision_maker_params(&self) -> usize {
        self.d_model * self.n_layers
    }

    /// Decision Maker size as a fraction of the model's parameter count.
    pub fn decision_maker_fraction(&self) -> f64 {
        self.decision_maker_params() as f64 / self.param_count() as f64
    }
}
