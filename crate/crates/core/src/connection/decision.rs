// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decision Maker scoring and Gumbel-Softmax layer selection.

use std::fmt;
use std::str::FromStr;

use rand::distributions::Open01;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{argmax, Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{ActivationTrace, InjectionSpec, Site};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// One-hot forward, soft-weight gradients.
    #[default]
    StraightThroughHard,
    Soft,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::StraightThroughHard => "straight_through_hard",
            SelectionMode::Soft => "soft",
        })
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight_through_hard" | "hard" => Ok(SelectionMode::StraightThroughHard),
            "soft" => Ok(SelectionMode::Soft),
            other => Err(Error::config(format!("unknown selection mode `{other}`"))),
        }
    }
}

/// Trainable `d×L` layer scorer plus its Gumbel-Softmax settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionMaker<T> {
    pub weight: Tensor<T>,
    pub tau: f64,
    pub mode: SelectionMode,
    pub noise: bool,
}

impl<T: Scalar> DecisionMaker<T> {
    pub fn zeros(d_model: usize, n_layers: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_model, n_layers]),
            tau: 1.0,
            mode: SelectionMode::default(),
            noise: true,
        }
    }

    pub fn init(d_model: usize, n_layers: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..d_model * n_layers)
            .map(|_| T::lit(dist.sample(rng)))
            .collect();
        Self {
            weight: Tensor::matrix(d_model, n_layers, data).expect("positive extents"),
            ..Self::zeros(d_model, n_layers)
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// `H = mean_l(f_l) + e` projected through `W_DM`, as graph ops.
///
/// `layers` are `L` nodes of shape `k×d`, `embedding` is `k×d`, and the
/// result is `k×L`.
pub fn decision_logits<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[NodeId],
    embedding: NodeId,
    weight: NodeId,
) -> Result<NodeId> {
    let pooled = g.mean_of(layers)?;
    let combined = g.add(pooled, embedding)?;
    g.matmul(combined, weight)
}

/// `−ln(−ln u)` for `u` in (0, 1).
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// `rows×cols` standard Gumbel noise.
pub fn sample_gumbel<T: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| T::lit(gumbel_from_uniform(rng.sample::<f64, _>(Open01))))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

/// Soft weights `softmax((H + G)/τ)` and the weights used for mixing
/// (the straight-through one-hot in hard mode).
pub fn gumbel_softmax_weights<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    tau: f64,
    mode: SelectionMode,
    noise: Option<Tensor<T>>,
) -> Result<(NodeId, NodeId)> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let perturbed = match noise {
        Some(n) => {
            let n = g.constant(n);
            g.add(logits, n)?
        }
        None => logits,
    };
    let scaled = g.scale(perturbed, T::lit(1.0 / tau));
    let soft = g.row_softmax(scaled);
    let mix = match mode {
        SelectionMode::Soft => soft,
        SelectionMode::StraightThroughHard => g.straight_through_onehot(soft),
    };
    Ok((soft, mix))
}

fn trace_nodes<T: Scalar>(
    g: &mut Graph<T>,
    trace: &ActivationTrace<T>,
    site: Site,
) -> Result<(Vec<NodeId>, NodeId)> {
    let layers = trace
        .site(site)
        .iter()
        .map(|v| g.constant(Tensor::row_vector(v.clone())))
        .collect();
    let emb = g.constant(Tensor::row_vector(trace.embedding.clone()));
    Ok((layers, emb))
}

fn check_trace<T: Scalar>(
    trace: &ActivationTrace<T>,
    e: &[T],
    dm: &DecisionMaker<T>,
) -> Result<()> {
    let (d, l) = (dm.weight.rows(), dm.weight.cols());
    if trace.ffn.len() != l || trace.ffn.iter().any(|f| f.len() != d) || e.len() != d {
        return Err(Error::ShapeMismatch {
            op: "decision_maker",
            left: vec![
                trace.ffn.len(),
                trace.ffn.first().map_or(0, Vec::len),
                e.len(),
            ],
            right: vec![l, d, d],
        });
    }
    Ok(())
}

/// Decision Maker logits `H` for one example's language-A FFN trace and
/// the embedding feature `e` of its own input.
pub fn combine_decision_logits<T: Scalar>(
    trace_en: &ActivationTrace<T>,
    e: &[T],
    dm: &DecisionMaker<T>,
) -> Result<Vec<T>> {
    check_trace(trace_en, e, dm)?;
    let mut g = Graph::new();
    let (layers, _) = trace_nodes(&mut g, trace_en, Site::Ffn)?;
    let emb = g.constant(Tensor::row_vector(e.to_vec()));
    let w = g.constant(dm.weight.clone());
    let h = decision_logits(&mut g, &layers, emb, w)?;
    Ok(g.value(h).data().to_vec())
}

/// Result of selecting over one example's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerChoice<T> {
    pub f_selected: Vec<T>,
    pub weights: Vec<T>,
    /// Argmax layer of the soft weights.
    pub layer: usize,
}

/// Gumbel-Softmax selection over the FFN vectors of `trace_en`.
pub fn gumbel_softmax_select<T: Scalar>(
    h: &[T],
    trace_en: &ActivationTrace<T>,
    dm: &DecisionMaker<T>,
    rng: &mut impl Rng,
) -> Result<LayerChoice<T>> {
    if h.len() != trace_en.n_layers() {
        return Err(Error::ShapeMismatch {
            op: "gumbel_softmax_select",
            left: vec![h.len()],
            right: vec![trace_en.n_layers()],
        });
    }
    let mut g = Graph::new();
    let (layers, _) = trace_nodes(&mut g, trace_en, Site::Ffn)?;
    let hn = g.constant(Tensor::row_vector(h.to_vec()));
    let noise = dm.noise.then(|| sample_gumbel(1, h.len(), rng));
    let (soft, mix) = gumbel_softmax_weights(&mut g, hn, dm.tau, dm.mode, noise)?;
    let fused = g.row_mix(mix, &layers)?;
    let weights = g.value(soft).data().to_vec();
    Ok(LayerChoice {
        f_selected: g.value(fused).data().to_vec(),
        layer: argmax(&weights),
        weights,
    })
}

/// Injection that adds `f_selected` to the first layer's FFN residual at
/// the tap position of the language-B pass.
pub fn fuse_first_layer<T: Scalar>(f_selected: Vec<T>, tap_position: usize) -> InjectionSpec<T> {
    InjectionSpec {
        layer: 0,
        position: tap_position,
        vector: f_selected,
        site: Site::Ffn,
    }
}
