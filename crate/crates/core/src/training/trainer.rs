// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{
    load_checkpoint, save_checkpoint, PhaseTimes, Progress, RngState, TrainState,
};
use super::optim::{clip_global_norm, Adam};
use super::{TrainConfig, TrainMode};
use crate::autograd::{Graph, NodeId};
use crate::connection::{
    cc_loss, ConnectionConfig, ConnectionNodes, DecisionMaker, EnglishSource, LayerSelector,
    SelectionRecord, SelectionSettings, SelectorRegistry,
};
use crate::corpus::{read_jsonl, ParallelExample, ReadOptions};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};
use crate::objective::teacher_forced_loss;
use crate::tensor::Tensor;

/// Stream ids keeping the data-order and noise generators apart.
const NOISE_STREAM: u64 = 0;
const ORDER_STREAM_BASE: u64 = 1;

struct BuiltLoss {
    loss: NodeId,
    /// Model parameters in layout order, then the Decision Maker weight.
    leaves: Vec<NodeId>,
    english_s: f64,
    main_s: f64,
    records: Vec<SelectionRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    /// Loss before the update.
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

pub struct Trainer {
    pub model: ModelConfig,
    pub connection: ConnectionConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    data: Vec<ParallelExample>,
    order: Vec<usize>,
    rng: ChaCha8Rng,
    selector: Box<dyn LayerSelector<f32>>,
    pub selections: Vec<SelectionRecord>,
    pub losses: Vec<(u64, f64)>,
}

fn validate_data(model: &ModelConfig, train: &TrainConfig, data: &[ParallelExample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for e in data {
        if train.mode == TrainMode::Cc && e.takes_fusion() && e.x_en.is_none() {
            return Err(Error::invalid(format!(
                "record {} lacks x_en, which cc training needs",
                e.id
            )));
        }
        let r = e.render();
        if r.tokens.len() - 1 > model.max_seq_len {
            return Err(Error::invalid(format!(
                "record {} renders to {} tokens, above max_seq_len {}",
                e.id,
                r.tokens.len(),
                model.max_seq_len
            )));
        }
        let top = r
            .tokens
            .iter()
            .chain(e.x_en.iter().flatten())
            .max()
            .copied()
            .unwrap_or(0);
        if top >= model.vocab_size {
            return Err(Error::invalid(format!(
                "record {} uses token {top}, outside vocab_size {}",
                e.id, model.vocab_size
            )));
        }
    }
    Ok(())
}

impl Trainer {
    /// Fresh run from initialization; every input is checked before step 0.
    pub fn new(
        model: ModelConfig,
        connection: ConnectionConfig,
        train: TrainConfig,
        data: Vec<ParallelExample>,
    ) -> Result<Self> {
        model.validate()?;
        connection.validate()?;
        train.validate()?;
        validate_data(&model, &train, &data)?;
        let params = Parameters::init(&model)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(model.seed ^ 0x5eed_d3c1);
        let mut dm = DecisionMaker::init(
            model.d_model,
            model.n_layers,
            train.dm_init_std,
            &mut init_rng,
        );
        dm.tau = connection.tau;
        dm.mode = connection.mode;
        let mut shapes: Vec<&[usize]> = params
            .named()
            .iter()
            .map(|(_, t)| t.shape())
            .collect::<Vec<_>>();
        shapes.push(dm.weight.shape());
        let adam = Adam::new(&shapes, train.beta1, train.beta2, train.adam_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(NOISE_STREAM);
        let progress = Progress {
            step: 0,
            epoch: 0,
            cursor: 0,
            total_steps: train.total_steps(data.len()),
            rng: RngState::capture(&rng),
            times: PhaseTimes::default(),
        };
        let state = TrainState {
            params,
            dm,
            adam,
            progress,
        };
        Self::assemble(model, connection, train, data, state, rng)
    }

    /// Continues the run saved in `dir` on the same data.
    pub fn resume(dir: &Path, data: Vec<ParallelExample>) -> Result<Self> {
        let (meta, state) = load_checkpoint(dir)?;
        validate_data(&meta.model, &meta.train, &data)?;
        let rng = state.progress.rng.restore()?;
        Self::assemble(meta.model, meta.connection, meta.train, data, state, rng)
    }

    fn assemble(
        model: ModelConfig,
        connection: ConnectionConfig,
        train: TrainConfig,
        data: Vec<ParallelExample>,
        state: TrainState,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let selector = SelectorRegistry::<f32>::with_builtins().create(&connection.selector)?;
        let order = epoch_order(train.seed, state.progress.epoch, data.len());
        Ok(Self {
            model,
            connection,
            train,
            state,
            data,
            order,
            rng,
            selector,
            selections: Vec::new(),
            losses: Vec::new(),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.state.progress.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.state.progress.step as usize >= self.total_steps()
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let p = &mut self.state.progress;
        if p.cursor >= self.order.len() {
            p.epoch += 1;
            p.cursor = 0;
            self.order = epoch_order(self.train.seed, p.epoch, self.data.len());
        }
        let end = (p.cursor + self.train.batch_size).min(self.order.len());
        let batch = self.order[p.cursor..end].to_vec();
        p.cursor = end;
        batch
    }

    /// Loss of `examples` under the current weights, without an update.
    /// Noise is drawn from a throwaway generator seeded by `noise_seed`.
    pub fn probe_loss(&self, examples: &[&ParallelExample], noise_seed: u64) -> Result<f64> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let (loss, _) = self.build_loss(&mut g, examples, 0.0, &mut rng, false)?;
        Ok(g.value(loss).item() as f64)
    }

    /// Gradient of the loss on `examples` with respect to the Decision
    /// Maker weight.
    pub fn dm_gradient(
        &self,
        examples: &[&ParallelExample],
        noise_seed: u64,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let (loss, dm_node) = self.build_loss(&mut g, examples, 0.0, &mut rng, false)?;
        g.backward(loss)?;
        Ok(g.grad(dm_node)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.state.dm.weight.shape())))
    }

    /// Builds the batch loss; returns it with the Decision Maker node.
    fn build_loss(
        &self,
        g: &mut Graph<f32>,
        examples: &[&ParallelExample],
        progress: f64,
        rng: &mut ChaCha8Rng,
        record: bool,
    ) -> Result<(NodeId, NodeId)> {
        let b = self.build_loss_timed(g, examples, progress, rng, record)?;
        Ok((b.loss, *b.leaves.last().expect("decision maker leaf")))
    }

    fn build_loss_timed(
        &self,
        g: &mut Graph<f32>,
        examples: &[&ParallelExample],
        progress: f64,
        rng: &mut ChaCha8Rng,
        record: bool,
    ) -> Result<BuiltLoss> {
        let pn = self.state.params.bind(g, true);
        let dm_node = g.param(self.state.dm.weight.clone());
        let mut leaves = pn.ordered();
        leaves.push(dm_node);
        match self.train.mode {
            TrainMode::Sft => {
                let t = Instant::now();
                let (loss, _) = teacher_forced_loss(g, &pn, &self.model, examples, None)?;
                Ok(BuiltLoss {
                    loss,
                    leaves,
                    english_s: 0.0,
                    main_s: t.elapsed().as_secs_f64(),
                    records: Vec::new(),
                })
            }
            TrainMode::Cc => {
                let detached;
                let english = if self.connection.detach_english {
                    detached = self.state.params.bind(g, false);
                    &detached
                } else {
                    &pn
                };
                let nodes = ConnectionNodes {
                    main: &pn,
                    english,
                    dm_weight: dm_node,
                };
                let settings = SelectionSettings {
                    tau: self.connection.tau_at(progress),
                    mode: self.connection.mode,
                    noise: true,
                };
                let out = cc_loss(
                    g,
                    nodes,
                    &self.model,
                    self.connection.site,
                    settings,
                    self.selector.as_ref(),
                    examples,
                    EnglishSource::Parallel,
                    rng,
                )?;
                let records = if record { out.records } else { Vec::new() };
                Ok(BuiltLoss {
                    loss: out.loss,
                    leaves,
                    english_s: out.english_time.as_secs_f64(),
                    main_s: out.main_time.as_secs_f64(),
                    records,
                })
            }
        }
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let started = Instant::now();
        let step = self.state.progress.step;
        let total = self.total_steps();
        let progress = if total == 0 {
            0.0
        } else {
            step as f64 / total as f64
        };
        let lr = self.train.lr_at(step as usize, total);
        let tau = self.connection.tau_at(progress);
        let batch = self.next_batch();
        let data = std::mem::take(&mut self.data);
        let examples: Vec<&ParallelExample> = batch.iter().map(|&i| &data[i]).collect();
        let mut g = Graph::new();
        let mut rng = self.rng.clone();
        let built = self.build_loss_timed(
            &mut g,
            &examples,
            progress,
            &mut rng,
            self.train.log_selections,
        );
        self.data = data;
        self.rng = rng;
        let BuiltLoss {
            loss: loss_node,
            leaves,
            english_s: en_s,
            main_s,
            records,
        } = built?;
        let loss = g.value(loss_node).item() as f64;

        let t = Instant::now();
        g.backward(loss_node)?;
        let mut grads: Vec<Tensor<f32>> = leaves
            .iter()
            .map(|&id| {
                g.grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
            })
            .collect();
        let grad_norm = clip_global_norm(&mut grads, self.train.grad_clip);
        if !loss.is_finite() || !grad_norm.is_finite() {
            let names = self.param_names();
            let worst = grads
                .iter()
                .zip(&names)
                .find(|(gr, _)| !gr.is_finite())
                .map(|(_, n)| n.clone())
                .unwrap_or_else(|| "loss".into());
            return Err(Error::NonFiniteLoss {
                step,
                lr,
                grad_norm,
                worst,
            });
        }
        let mut targets = self.state.params.tensors_mut();
        targets.push(&mut self.state.dm.weight);
        self.state.adam.step(&mut targets, &grads, lr);
        let backward_s = t.elapsed().as_secs_f64();

        let times = &mut self.state.progress.times;
        times.forward_en_s += en_s;
        times.forward_main_s += main_s;
        times.backward_s += backward_s;
        times.total_s += started.elapsed().as_secs_f64();
        self.state.progress.step += 1;
        self.state.progress.rng = RngState::capture(&self.rng);
        self.selections.extend(records);
        self.losses.push((step, loss));
        Ok(StepOutcome {
            step,
            loss,
            lr,
            tau,
            grad_norm,
        })
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .state
            .params
            .named()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        names.push(super::DM_TENSOR.into());
        names
    }

    /// Runs until the step budget is spent.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.model, &self.connection, &self.train, &self.state)
    }

    pub fn data(&self) -> &[ParallelExample] {
        &self.data
    }
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ORDER_STREAM_BASE + epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Reads the training file picked by the run's augmentation.
pub fn load_training_data(data_dir: &Path, train: &TrainConfig) -> Result<Vec<ParallelExample>> {
    let path = data_dir.join(train.augmentation.train_file());
    if !path.exists() {
        return Err(Error::MissingPath(path));
    }
    read_jsonl(
        &path,
        ReadOptions {
            require_x_en: train.mode == TrainMode::Cc,
        },
    )
}

/// Contents of `timing.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mode: TrainMode,
    pub steps: u64,
    pub forward_en_s: f64,
    pub forward_main_s: f64,
    pub backward_s: f64,
    pub total_s: f64,
    pub per_step_s: f64,
    /// Per-step wall time over that of the reference run, when given.
    pub ratio_vs_reference: Option<f64>,
    /// Range measured on 7–8B models; a double forward at toy scale is not
    /// expected to reproduce it.
    pub full_scale_ratio_range: [f64; 2],
}

pub fn timing_report(
    mode: TrainMode,
    steps: u64,
    times: &PhaseTimes,
    reference: Option<&TimingReport>,
) -> TimingReport {
    let per_step_s = if steps == 0 {
        0.0
    } else {
        times.total_s / steps as f64
    };
    TimingReport {
        mode,
        steps,
        forward_en_s: times.forward_en_s,
        forward_main_s: times.forward_main_s,
        backward_s: times.backward_s,
        total_s: times.total_s,
        per_step_s,
        ratio_vs_reference: reference
            .filter(|r| r.per_step_s > 0.0)
            .map(|r| per_step_s / r.per_step_s),
        full_scale_ratio_range: [1.12, 1.16],
    }
}

pub struct RunOutputs {
    pub out_dir: PathBuf,
    pub losses: Vec<(u64, f64)>,
    pub timing: TimingReport,
}

/// Trains (or resumes) and writes `checkpoint/`, `loss.csv`,
/// `timing.json` and, for cc runs, `selections.jsonl` under `out_dir`.
pub fn run_training(
    trainer: &mut Trainer,
    out_dir: &Path,
    reference_timing: Option<&Path>,
) -> Result<RunOutputs> {
    let reference = match reference_timing {
        Some(p) if !p.exists() => return Err(Error::MissingPath(p.to_path_buf())),
        Some(p) => Some(serde_json::from_str::<TimingReport>(&fs::read_to_string(
            p,
        )?)?),
        None => None,
    };
    fs::create_dir_all(out_dir)?;
    let resumed = trainer.state.progress.step > 0;
    trainer.run()?;
    trainer.save(&out_dir.join("checkpoint"))?;

    let loss_path = out_dir.join("loss.csv");
    let mut csv = if resumed && loss_path.exists() {
        fs::OpenOptions::new().append(true).open(&loss_path)?
    } else {
        let mut f = fs::File::create(&loss_path)?;
        writeln!(f, "step,loss")?;
        f
    };
    for (s, l) in &trainer.losses {
        writeln!(csv, "{s},{l}")?;
    }
    if trainer.train.mode == TrainMode::Cc && trainer.train.log_selections {
        let mut f = fs::File::create(out_dir.join("selections.jsonl"))?;
        for r in &trainer.selections {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
    }
    let p = &trainer.state.progress;
    let timing = timing_report(trainer.train.mode, p.step, &p.times, reference.as_ref());
    fs::write(
        out_dir.join("timing.json"),
        serde_json::to_string_pretty(&timing)? + "\n",
    )?;
    Ok(RunOutputs {
        out_dir: out_dir.to_path_buf(),
        losses: trainer.losses.clone(),
        timing,
    })
}
