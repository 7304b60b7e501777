// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bilingual forward: language-A activations, layer selection, and the
//! first-layer fusion into the language-B pass.

use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decision::{DecisionMaker, SelectionMode};
use super::selector::{LayerSelector, SelectionInput};
use crate::autograd::{argmax, Graph, NodeId};
use crate::corpus::{ParallelExample, TaskKind};
use crate::error::{Error, Result};
use crate::model::{forward_batch, BatchInjection, ModelConfig, ParamNodes, Parameters, Site};
use crate::objective::{batch_offsets, teacher_forced_loss};
use crate::tensor::{Scalar, Tensor};

/// Decoder layer the fusion vector is added to.
pub const FUSION_LAYER: usize = 0;

/// How the cross-lingual connection is wired for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectionConfig {
    /// Registry name of the layer selector.
    pub selector: String,
    pub site: Site,
    pub tau: f64,
    /// Final temperature of a linear anneal over training; `None` keeps
    /// `tau` fixed.
    pub tau_end: Option<f64>,
    pub mode: SelectionMode,
    /// Keep the language-A pass out of the gradient graph.
    pub detach_english: bool,
}

impl Default for ConnectionConfig {
    fn default() -> Self {
        Self {
            selector: "decision_maker".into(),
            site: Site::Ffn,
            tau: 1.0,
            tau_end: None,
            mode: SelectionMode::StraightThroughHard,
            detach_english: false,
        }
    }
}

impl ConnectionConfig {
    /// Temperature after `progress` (0..=1) of training.
    pub fn tau_at(&self, progress: f64) -> f64 {
        match self.tau_end {
            Some(end) => self.tau + (end - self.tau) * progress.clamp(0.0, 1.0),
            None => self.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.tau_end.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::config("temperatures must be positive"));
        }
        Ok(())
    }
}

/// Source of the language-A activations fed to the selector.
#[derive(Clone, Copy, Debug)]
pub enum EnglishSource<'a, T> {
    /// Run the parallel `x_en` prompt.
    Parallel,
    /// Map the example's own activations through a `d×d` Transform Matrix.
    Transform(&'a Tensor<T>),
}

/// One line of `selections.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    /// Argmax layer `s`.
    pub layer: usize,
    pub weights: Vec<f64>,
}

/// Graph handles the connection reads from.
#[derive(Clone, Copy, Debug)]
pub struct ConnectionNodes<'a> {
    /// Parameters of the language-B (main) pass.
    pub main: &'a ParamNodes,
    /// Parameters of the language-A pass; a constant binding detaches it.
    pub english: &'a ParamNodes,
    pub dm_weight: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct SelectionSettings {
    pub tau: f64,
    pub mode: SelectionMode,
    pub noise: bool,
}

impl<T: Scalar> From<&DecisionMaker<T>> for SelectionSettings {
    fn from(dm: &DecisionMaker<T>) -> Self {
        Self {
            tau: dm.tau,
            mode: dm.mode,
            noise: dm.noise,
        }
    }
}

/// Fusion vectors for a set of examples (`k×d`) with their selections.
pub struct FusionVectors {
    pub vectors: NodeId,
    pub records: Vec<SelectionRecord>,
}

/// Embedding-layer feature of each prompt, read at its tap position or
/// averaged over positions `0..=tap`.
fn embedding_feature<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    config: &ModelConfig,
    prompts: &[&[usize]],
    taps: &[usize],
) -> Result<NodeId> {
    use crate::model::EmbeddingPooling;
    let (mut ids, mut pos, mut owner) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (prompt, &tap)) in prompts.iter().zip(taps).enumerate() {
        let range = match config.embedding_pooling {
            EmbeddingPooling::Tap => tap..tap + 1,
            EmbeddingPooling::Mean => 0..tap + 1,
        };
        for t in range {
            ids.push(prompt[t]);
            pos.push(t);
            owner.push(i);
        }
    }
    let tok = g.embedding(p.tok_emb, &ids)?;
    let ps = g.embedding(p.pos_emb, &pos)?;
    let emb = g.add(tok, ps)?;
    if config.embedding_pooling == EmbeddingPooling::Tap {
        return Ok(emb);
    }
    let mut avg = Tensor::zeros(&[prompts.len(), ids.len()]);
    for (r, &i) in owner.iter().enumerate() {
        let w = T::one() / T::from_usize(taps[i] + 1).unwrap();
        avg.row_mut(i)[r] = w;
    }
    let avg = g.constant(avg);
    g.matmul(avg, emb)
}

/// Builds the fusion vectors of `examples` (all of which take fusion).
///
/// The language-A side is either the parallel prompt's activations or the
/// example's own activations mapped through `W_T`; either way they are read
/// at the tap position from the configured site of every layer.
#[allow(clippy::too_many_arguments)]
pub fn fusion_vectors<T: Scalar>(
    g: &mut Graph<T>,
    nodes: ConnectionNodes<'_>,
    config: &ModelConfig,
    site: Site,
    settings: SelectionSettings,
    selector: &dyn LayerSelector<T>,
    examples: &[&ParallelExample],
    source: EnglishSource<'_, T>,
    rng: &mut ChaCha8Rng,
) -> Result<FusionVectors> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to fuse"));
    }
    let prompts: Vec<_> = examples.iter().map(|e| e.prompt()).collect();
    let taps: Vec<usize> = prompts.iter().map(|r| r.tap()).collect();
    let side_prompts: Vec<Vec<usize>> = match source {
        EnglishSource::Parallel => examples
            .iter()
            .map(|e| e.prompt_en().map(|r| r.tokens))
            .collect::<Result<_>>()?,
        EnglishSource::Transform(_) => prompts.iter().map(|r| r.tokens.clone()).collect(),
    };
    for (sp, p) in side_prompts.iter().zip(&prompts) {
        if sp.len() != p.tokens.len() {
            return Err(Error::invalid(
                "parallel prompt must align with the prompt position-for-position",
            ));
        }
    }
    let seqs: Vec<&[usize]> = side_prompts.iter().map(Vec::as_slice).collect();
    let mut starts = Vec::with_capacity(seqs.len());
    let mut acc = 0;
    for s in &seqs {
        starts.push(acc);
        acc += s.len();
    }
    let tap_rows: Vec<usize> = starts.iter().zip(&taps).map(|(s, t)| s + t).collect();
    let side = forward_batch(g, nodes.english, config, &seqs, None, Some(&tap_rows))?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for &node in side.site_outputs(site) {
        let rows = g.gather_rows(node, &tap_rows)?;
        let rows = match source {
            EnglishSource::Parallel => rows,
            EnglishSource::Transform(w) => {
                let w = g.constant(w.clone());
                g.matmul(rows, w)?
            }
        };
        layers.push(rows);
    }

    let prompt_refs: Vec<&[usize]> = prompts.iter().map(|r| r.tokens.as_slice()).collect();
    let embedding = embedding_feature(g, nodes.main, config, &prompt_refs, &taps)?;
    let input = SelectionInput {
        layers: &layers,
        embedding,
        dm_weight: nodes.dm_weight,
        tau: settings.tau,
        mode: settings.mode,
        noise: settings.noise,
    };
    let selection = selector.select(g, &input, rng)?;
    let vectors = g.row_mix(selection.mix, &layers)?;
    let soft = g.value(selection.soft);
    let records = examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let w: Vec<f64> = soft
                .row(i)
                .iter()
                .map(|x| x.to_f64().unwrap_or(f64::NAN))
                .collect();
            SelectionRecord {
                id: e.id,
                task: Some(e.task),
                layer: argmax(&w),
                weights: w,
            }
        })
        .collect();
    Ok(FusionVectors { vectors, records })
}

/// Loss of a mixed batch under the connection, plus bookkeeping.
pub struct CcLoss {
    pub loss: NodeId,
    pub records: Vec<SelectionRecord>,
    /// Time spent building the language-A side and the selection.
    pub english_time: Duration,
    pub main_time: Duration,
}

/// Teacher-forced loss where every example that takes fusion (language B)
/// gets its fusion vector injected at its tap position of the first layer.
/// Language-A records go through unchanged.
#[allow(clippy::too_many_arguments)]
pub fn cc_loss<T: Scalar>(
    g: &mut Graph<T>,
    nodes: ConnectionNodes<'_>,
    config: &ModelConfig,
    site: Site,
    settings: SelectionSettings,
    selector: &dyn LayerSelector<T>,
    examples: &[&ParallelExample],
    source: EnglishSource<'_, T>,
    rng: &mut ChaCha8Rng,
) -> Result<CcLoss> {
    let t0 = Instant::now();
    let offsets = batch_offsets(examples);
    let fused: Vec<usize> = (0..examples.len())
        .filter(|&i| examples[i].takes_fusion())
        .collect();
    let (injection, records) = if fused.is_empty() {
        (None, Vec::new())
    } else {
        let subset: Vec<&ParallelExample> = fused.iter().map(|&i| examples[i]).collect();
        let fv = fusion_vectors(
            g, nodes, config, site, settings, selector, &subset, source, rng,
        )?;
        let rows = fused
            .iter()
            .map(|&i| offsets[i] + examples[i].prompt().tap())
            .collect();
        (
            Some(BatchInjection {
                layer: FUSION_LAYER,
                site,
                rows,
                vectors: fv.vectors,
            }),
            fv.records,
        )
    };
    let english_time = t0.elapsed();
    let t1 = Instant::now();
    let (loss, _) = teacher_forced_loss(g, nodes.main, config, examples, injection.as_ref())?;
    Ok(CcLoss {
        loss,
        records,
        english_time,
        main_time: t1.elapsed(),
    })
}

/// Single-example fused forward: language-A pass, selection, and the
/// teacher-forced language-B pass with the fusion injection. Returns the
/// language-B logits over the full training input and the selection.
pub fn cc_forward<T: Scalar>(
    params: &Parameters<T>,
    dm: &DecisionMaker<T>,
    config: &ModelConfig,
    example: &ParallelExample,
    selector: &dyn LayerSelector<T>,
    site: Site,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, SelectionRecord)> {
    dm.validate()?;
    example.x_en()?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let w = g.constant(dm.weight.clone());
    let nodes = ConnectionNodes {
        main: &p,
        english: &p,
        dm_weight: w,
    };
    let fv = fusion_vectors(
        &mut g,
        nodes,
        config,
        site,
        dm.into(),
        selector,
        &[example],
        EnglishSource::Parallel,
        rng,
    )?;
    let rendered = example.render();
    let (inputs, _, _) = rendered.training_view();
    let injection = BatchInjection {
        layer: FUSION_LAYER,
        site,
        rows: vec![rendered.tap()],
        vectors: fv.vectors,
    };
    let fwd = forward_batch(&mut g, &p, config, &[inputs], Some(&injection), None)?;
    Ok((
        g.value(fwd.logits).clone(),
        fv.records.into_iter().next().expect("one record"),
    ))
}
