// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training loops for plain fine-tuning and the fused variant, with
//! resumable checkpoints and per-phase timing.

mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, PhaseTimes, Progress, RngState, TrainState,
    DM_TENSOR,
};
pub use config::{parse_toml, Augmentation, TrainConfig, TrainMode};
pub use optim::{clip_global_norm, global_norm, Adam};
pub use trainer::{
    load_training_data, run_training, timing_report, RunOutputs, StepOutcome, TimingReport, Trainer,
};
