// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy decoder-only transformer with per-layer taps and a single-position
//! injection hook.

mod config;
mod forward;
mod generate;
mod params;

pub use config::{EmbeddingPooling, ModelConfig};
pub use forward::{
    forward_batch, forward_with_hooks, ActivationTrace, BatchForward, BatchInjection, Hooks,
    InjectionSpec, Site,
};
pub use generate::{generate_greedy, generate_greedy_batch};
pub use params::{LayerNodes, LayerParams, ParamNodes, Parameters};
