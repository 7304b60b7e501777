// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// [`Error::is_validation`] separates bad input (exit code 1 at the CLI)
/// from failures that happen while doing the work (exit code 2).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("missing path: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("checkpoint tensor `{name}`: {msg}")]
    Checkpoint { name: String, msg: String },

    #[error("non-finite loss at step {step} (lr {lr:e}, grad norm {grad_norm:e}, worst tensor `{worst}`)")]
    NonFiniteLoss {
        step: u64,
        lr: f64,
        grad_norm: f64,
        worst: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    /// True for errors caused by the caller's input rather than by the run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::ShapeMismatch { .. }
                | Self::InvalidInput(_)
                | Self::Config(_)
                | Self::Parse { .. }
                | Self::MissingPath(_)
                | Self::Checkpoint { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
