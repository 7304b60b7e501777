// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::TrainConfig;
use crate::connection::{ConnectionConfig, DecisionMaker};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};
use crate::store::{read_tensor_dir, take_tensor, write_tensor_dir};

pub const DM_TENSOR: &str = "decision_maker.weight";

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128`; JSON numbers cannot hold it.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::config(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Cumulative wall time per phase, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub forward_en_s: f64,
    pub forward_main_s: f64,
    pub backward_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed optimizer steps.
    pub step: u64,
    pub epoch: u64,
    /// Next index into the current epoch's permutation.
    pub cursor: usize,
    pub total_steps: usize,
    pub rng: RngState,
    pub times: PhaseTimes,
}

/// Everything a run needs to continue where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Parameters<f32>,
    pub dm: DecisionMaker<f32>,
    pub adam: Adam<f32>,
    pub progress: Progress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub connection: ConnectionConfig,
    pub train: TrainConfig,
    pub progress: Progress,
    pub param_count: usize,
    pub decision_maker_params: usize,
    /// `d·L / param_count`.
    pub decision_maker_fraction: f64,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &ModelConfig,
    connection: &ConnectionConfig,
    train: &TrainConfig,
    state: &TrainState,
) -> Result<()> {
    let mut tensors: Vec<(String, &crate::Tensor<f32>)> = state.params.named();
    tensors.push((DM_TENSOR.into(), &state.dm.weight));
    let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
    for (n, m) in names.iter().zip(&state.adam.m) {
        tensors.push((format!("adam.m.{n}"), m));
    }
    for (n, v) in names.iter().zip(&state.adam.v) {
        tensors.push((format!("adam.v.{n}"), v));
    }
    let meta = CheckpointMeta {
        model: model.clone(),
        connection: connection.clone(),
        train: train.clone(),
        progress: state.progress.clone(),
        param_count: model.param_count(),
        decision_maker_params: model.decision_maker_params(),
        decision_maker_fraction: model.decision_maker_fraction(),
    };
    let mut value = serde_json::to_value(&meta)?;
    value["adam_t"] = state.adam.t.into();
    write_tensor_dir(dir, &tensors, value)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, TrainState)> {
    let (mut tensors, value) = read_tensor_dir::<f32>(dir)?;
    let adam_t = value.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(0);
    let meta: CheckpointMeta = serde_json::from_value(value)?;
    meta.model.validate()?;
    let template = Parameters::<f32>::init(&meta.model)?;
    let mut ordered = Vec::new();
    let mut names = Vec::new();
    for (name, t) in template.named() {
        let got = take_tensor(&mut tensors, &name)?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint {
                name,
                msg: format!("shape {:?}, config needs {:?}", got.shape(), t.shape()),
            });
        }
        names.push(name);
        ordered.push(got);
    }
    let params = Parameters::from_ordered(&meta.model, ordered)?;
    let weight = take_tensor(&mut tensors, DM_TENSOR)?;
    let (d, l) = (meta.model.d_model, meta.model.n_layers);
    if weight.shape() != [d, l] {
        return Err(Error::Checkpoint {
            name: DM_TENSOR.into(),
            msg: format!("shape {:?}, config needs [{d}, {l}]", weight.shape()),
        });
    }
    names.push(DM_TENSOR.into());
    let dm = DecisionMaker {
        weight,
        tau: meta.connection.tau,
        mode: meta.connection.mode,
        noise: false,
    };
    let mut adam = Adam::new(&[], meta.train.beta1, meta.train.beta2, meta.train.adam_eps);
    adam.t = adam_t;
    for n in &names {
        adam.m
            .push(take_tensor(&mut tensors, &format!("adam.m.{n}"))?);
    }
    for n in &names {
        adam.v
            .push(take_tensor(&mut tensors, &format!("adam.v.{n}"))?);
    }
    if let Some((extra, _)) = tensors.first() {
        return Err(Error::Checkpoint {
            name: extra.clone(),
            msg: "not part of the parameter layout".into(),
        });
    }
    let state = TrainState {
        params,
        dm,
        adam,
        progress: meta.progress.clone(),
    };
    Ok((meta, state))
}
