// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::connection::{
    fusion_vectors, ConnectionConfig, ConnectionNodes, DecisionMaker, EnglishSource,
    SelectionRecord, SelectionSettings, SelectorRegistry, FUSION_LAYER,
};
use crate::corpus::{Lang, LanguagePair, ParallelExample, TaskKind, FIRST_CONTENT};
use crate::error::{Error, Result};
use crate::model::{generate_greedy_batch, InjectionSpec, ModelConfig, Parameters};
use crate::tensor::Tensor;
use crate::training::{load_checkpoint, TrainMode};
use crate::transform::TransformFit;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Plain decoding, no fusion.
    #[default]
    None,
    /// Fusion from the real parallel prompt.
    ParallelInput,
    /// Fusion from the example's own activations mapped through `W_T`.
    TransformMatrix,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [
        EvalMode::None,
        EvalMode::ParallelInput,
        EvalMode::TransformMatrix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::None => "none",
            EvalMode::ParallelInput => "parallel_input",
            EvalMode::TransformMatrix => "transform_matrix",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown eval mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    pub batch_size: usize,
    /// Seed for selectors that draw at inference (random pooling).
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 8,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Weights needed to decode, with or without fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceModel {
    pub model: ModelConfig,
    pub connection: ConnectionConfig,
    pub params: Parameters<f32>,
    pub dm: DecisionMaker<f32>,
    pub trained_as: TrainMode,
}

impl InferenceModel {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.exists() {
            return Err(Error::MissingPath(dir.to_path_buf()));
        }
        let (meta, state) = load_checkpoint(dir)?;
        Ok(Self {
            model: meta.model,
            connection: meta.connection,
            params: state.params,
            dm: state.dm,
            trained_as: meta.train.mode,
        })
    }
}

/// Exact-match counts for one slice of the data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub n: usize,
    pub correct: usize,
    /// Records whose answer is judged for language consistency.
    pub judged: usize,
    pub consistent: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }

    pub fn consistency(&self) -> f64 {
        if self.judged == 0 {
            1.0
        } else {
            self.consistent as f64 / self.judged as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub n: usize,
    pub by_lang: BTreeMap<Lang, Tally>,
    /// Keyed `"<lang>/<task>"`.
    pub by_lang_task: BTreeMap<String, Tally>,
    pub accuracy: BTreeMap<Lang, f64>,
    pub consistency: BTreeMap<Lang, f64>,
    /// Unweighted mean of the per-language accuracies.
    pub average_accuracy: f64,
}

impl EvalReport {
    pub fn accuracy_of(&self, lang: Lang) -> f64 {
        self.accuracy.get(&lang).copied().unwrap_or(0.0)
    }

    pub fn task_accuracy(&self, lang: Lang, task: TaskKind) -> Option<f64> {
        self.by_lang_task
            .get(&format!("{lang}/{task}"))
            .map(Tally::accuracy)
    }
}

/// One decoded example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: u64,
    pub lang: Lang,
    pub task: TaskKind,
    /// Generated tokens after the prompt, end-of-sequence stripped.
    pub answer: Vec<usize>,
    pub terminated: bool,
    pub correct: bool,
}

pub struct EvalOutput {
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
    pub selections: Vec<SelectionRecord>,
}

/// An answer is consistent when each of its content tokens belongs to the
/// prompt language; control tokens are ignored.
pub fn is_language_consistent(answer: &[usize], lang: Lang, pair: &LanguagePair) -> bool {
    let spec = match lang {
        Lang::LangA => &pair.a,
        Lang::LangB => &pair.b,
    };
    answer
        .iter()
        .all(|&t| t < FIRST_CONTENT || spec.contains(t))
}

/// Greedy-decodes every example and scores exact matches against `y`.
///
/// `mode = none` reads only `x`. The fused modes inject into every record
/// that takes fusion; `transform_matrix` requires `fit`, `parallel_input`
/// requires `x_en`.
pub fn evaluate_accuracy(
    m: &InferenceModel,
    data: &[ParallelExample],
    mode: EvalMode,
    fit: Option<&TransformFit>,
    pair: &LanguagePair,
    cfg: &EvalConfig,
) -> Result<EvalOutput> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let w_t: Option<Tensor<f32>> = match mode {
        EvalMode::TransformMatrix => {
            let fit = fit
                .ok_or_else(|| Error::invalid("transform_matrix evaluation needs a fitted W_T"))?;
            if fit.w.shape() != [m.model.d_model, m.model.d_model] {
                return Err(Error::ShapeMismatch {
                    op: "evaluate_accuracy",
                    left: fit.w.shape().to_vec(),
                    right: vec![m.model.d_model, m.model.d_model],
                });
            }
            if fit.site != m.connection.site {
                return Err(Error::invalid(format!(
                    "W_T was fitted on {} activations but the model fuses {}",
                    fit.site, m.connection.site
                )));
            }
            Some(fit.w.cast())
        }
        EvalMode::ParallelInput => {
            if let Some(e) = data.iter().find(|e| e.takes_fusion() && e.x_en.is_none()) {
                return Err(Error::invalid(format!(
                    "record {} lacks x_en for parallel_input",
                    e.id
                )));
            }
            None
        }
        EvalMode::None => None,
    };
    let selector = SelectorRegistry::<f32>::with_builtins().create(&m.connection.selector)?;
    let settings = SelectionSettings {
        tau: m.connection.tau,
        mode: m.connection.mode,
        noise: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_new = cfg.max_new_tokens;
    let mut predictions = Vec::with_capacity(data.len());
    let mut selections = Vec::new();

    for chunk in data.chunks(cfg.batch_size.max(1)) {
        let prompts: Vec<Vec<usize>> = chunk.iter().map(|e| e.prompt().tokens).collect();
        let mut injections: Vec<Option<InjectionSpec<f32>>> = vec![None; chunk.len()];
        let fused: Vec<usize> = if mode == EvalMode::None {
            Vec::new()
        } else {
            (0..chunk.len())
                .filter(|&i| chunk[i].takes_fusion())
                .collect()
        };
        if !fused.is_empty() {
            let subset: Vec<&ParallelExample> = fused.iter().map(|&i| &chunk[i]).collect();
            let mut g = Graph::new();
            let p = m.params.bind(&mut g, false);
            let w = g.constant(m.dm.weight.clone());
            let nodes = ConnectionNodes {
                main: &p,
                english: &p,
                dm_weight: w,
            };
            let source = match &w_t {
                Some(w) => EnglishSource::Transform(w),
                None => EnglishSource::Parallel,
            };
            let fv = fusion_vectors(
                &mut g,
                nodes,
                &m.model,
                m.connection.site,
                settings,
                selector.as_ref(),
                &subset,
                source,
                &mut rng,
            )?;
            let vectors = g.value(fv.vectors);
            for (r, &i) in fused.iter().enumerate() {
                injections[i] = Some(InjectionSpec {
                    layer: FUSION_LAYER,
                    position: prompts[i].len() - 2,
                    vector: vectors.row(r).to_vec(),
                    site: m.connection.site,
                });
            }
            selections.extend(fv.records);
        }
        let outs = generate_greedy_batch(&m.params, &m.model, &prompts, &injections, max_new)?;
        for ((e, prompt), out) in chunk.iter().zip(&prompts).zip(outs) {
            let mut answer = out[prompt.len()..].to_vec();
            let terminated = answer.last() == Some(&m.model.eos_token_id);
            if terminated {
                answer.pop();
            }
            let correct = terminated && answer == e.y;
            predictions.push(Prediction {
                id: e.id,
                lang: e.lang,
                task: e.task,
                answer,
                terminated,
                correct,
            });
        }
    }
    let report = summarize(mode, &predictions, pair);
    Ok(EvalOutput {
        report,
        predictions,
        selections,
    })
}

pub fn summarize(mode: EvalMode, predictions: &[Prediction], pair: &LanguagePair) -> EvalReport {
    let mut by_lang: BTreeMap<Lang, Tally> = BTreeMap::new();
    let mut by_lang_task: BTreeMap<String, Tally> = BTreeMap::new();
    for p in predictions {
        let judged = p.task != TaskKind::Mt;
        let consistent = judged && is_language_consistent(&p.answer, p.lang, pair);
        for t in [
            by_lang.entry(p.lang).or_default(),
            by_lang_task
                .entry(format!("{}/{}", p.lang, p.task))
                .or_default(),
        ] {
            t.n += 1;
            t.correct += p.correct as usize;
            t.judged += judged as usize;
            t.consistent += consistent as usize;
        }
    }
    let accuracy: BTreeMap<Lang, f64> = by_lang.iter().map(|(l, t)| (*l, t.accuracy())).collect();
    let consistency = by_lang.iter().map(|(l, t)| (*l, t.consistency())).collect();
    let average_accuracy = if accuracy.is_empty() {
        0.0
    } else {
        accuracy.values().sum::<f64>() / accuracy.len() as f64
    };
    EvalReport {
        mode,
        n: predictions.len(),
        by_lang,
        by_lang_task,
        accuracy,
        consistency,
        average_accuracy,
    }
}

/// Parallel-input versus Transform Matrix scores on the same prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub parallel: EvalReport,
    pub transform: EvalReport,
    /// `acc_parallel − acc_transform` per language.
    pub signed_delta: BTreeMap<Lang, f64>,
    pub abs_delta: BTreeMap<Lang, f64>,
    pub abs_delta_average: f64,
}

/// Signed and absolute per-language accuracy differences `a − b`.
pub fn accuracy_delta(
    a: &EvalReport,
    b: &EvalReport,
) -> (BTreeMap<Lang, f64>, BTreeMap<Lang, f64>, f64) {
    let signed: BTreeMap<Lang, f64> = a
        .accuracy
        .iter()
        .filter_map(|(l, x)| b.accuracy.get(l).map(|y| (*l, x - y)))
        .collect();
    let abs: BTreeMap<Lang, f64> = signed.iter().map(|(l, d)| (*l, d.abs())).collect();
    let avg = if abs.is_empty() {
        0.0
    } else {
        abs.values().sum::<f64>() / abs.len() as f64
    };
    (signed, abs, avg)
}

pub fn parallel_vs_transform_delta(
    m: &InferenceModel,
    data: &[ParallelExample],
    fit: &TransformFit,
    pair: &LanguagePair,
    cfg: &EvalConfig,
) -> Result<DeltaReport> {
    let parallel = evaluate_accuracy(m, data, EvalMode::ParallelInput, None, pair, cfg)?.report;
    let transform =
        evaluate_accuracy(m, data, EvalMode::TransformMatrix, Some(fit), pair, cfg)?.report;
    let (signed_delta, abs_delta, abs_delta_average) = accuracy_delta(&parallel, &transform);
    Ok(DeltaReport {
        parallel,
        transform,
        signed_delta,
        abs_delta,
        abs_delta_average,
    })
}
