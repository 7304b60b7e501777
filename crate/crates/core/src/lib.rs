// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-lingual activation fusion on a toy decoder-only transformer.
//!
//! During training a language-B example is run twice: once as its parallel
//! language-A rendering, whose per-layer activations at the position before
//! the response start token are pooled by a layer selector, and once as
//! itself with the selected vector added to the first layer's FFN residual.
//! At inference a least-squares Transform Matrix maps the example's own
//! activations to stand-ins for the language-A ones.

pub mod autograd;
pub mod config;
pub mod connection;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod store;
pub mod tensor;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
