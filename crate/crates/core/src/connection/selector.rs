// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-selection strategies behind one trait, registered by name.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::decision::{decision_logits, gumbel_softmax_weights, sample_gumbel, SelectionMode};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Graph inputs for selecting one layer vector per example.
#[derive(Clone, Copy, Debug)]
pub struct SelectionInput<'a> {
    /// `L` nodes of shape `k×d`: language-A activations per layer.
    pub layers: &'a [NodeId],
    /// `k×d` embedding feature of each example's own input.
    pub embedding: NodeId,
    /// `d×L` Decision Maker weight.
    pub dm_weight: NodeId,
    pub tau: f64,
    pub mode: SelectionMode,
    pub noise: bool,
}

impl SelectionInput<'_> {
    fn rows<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.value(self.embedding).rows()
    }
}

/// `k×L` weight nodes: `soft` is reported, `mix` combines the layers.
#[derive(Clone, Copy, Debug)]
pub struct Selection {
    pub soft: NodeId,
    pub mix: NodeId,
}

pub trait LayerSelector<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn select(
        &self,
        g: &mut Graph<T>,
        input: &SelectionInput<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Selection>;
}

/// Learned scorer `W_DM` followed by Gumbel-Softmax.
pub struct DecisionMakerSelector;

impl<T: Scalar> LayerSelector<T> for DecisionMakerSelector {
    fn name(&self) -> &'static str {
        "decision_maker"
    }

    fn select(
        &self,
        g: &mut Graph<T>,
        input: &SelectionInput<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Selection> {
        let h = decision_logits(g, input.layers, input.embedding, input.dm_weight)?;
        let noise = input
            .noise
            .then(|| sample_gumbel(input.rows(g), input.layers.len(), rng));
        let (soft, mix) = gumbel_softmax_weights(g, h, input.tau, input.mode, noise)?;
        Ok(Selection { soft, mix })
    }
}

/// Uniform `1/L` average of all layers.
pub struct MeanPooling;

impl<T: Scalar> LayerSelector<T> for MeanPooling {
    fn name(&self) -> &'static str {
        "mean_pooling"
    }

    fn select(
        &self,
        g: &mut Graph<T>,
        input: &SelectionInput<'_>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Selection> {
        let l = input.layers.len();
        let w = Tensor::filled(&[input.rows(g), l], T::one() / T::from_usize(l).unwrap());
        let w = g.constant(w);
        Ok(Selection { soft: w, mix: w })
    }
}

/// One uniformly drawn layer per example.
pub struct RandomPooling;

impl<T: Scalar> LayerSelector<T> for RandomPooling {
    fn name(&self) -> &'static str {
        "random_pooling"
    }

    fn select(
        &self,
        g: &mut Graph<T>,
        input: &SelectionInput<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Selection> {
        let (k, l) = (input.rows(g), input.layers.len());
        let mut w = Tensor::zeros(&[k, l]);
        for r in 0..k {
            let pick = rng.gen_range(0..l);
            w.row_mut(r)[pick] = T::one();
        }
        let w = g.constant(w);
        Ok(Selection { soft: w, mix: w })
    }
}

pub type SelectorFactory<T> = fn() -> Box<dyn LayerSelector<T>>;

/// Name → constructor table for [`LayerSelector`]s.
pub struct SelectorRegistry<T> {
    entries: BTreeMap<&'static str, SelectorFactory<T>>,
}

impl<T: Scalar> Default for SelectorRegistry<T> {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl<T: Scalar> SelectorRegistry<T> {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// `decision_maker`, `mean_pooling` and `random_pooling`.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("decision_maker", || Box::new(DecisionMakerSelector))
            .and_then(|_| r.register("mean_pooling", || Box::new(MeanPooling)))
            .and_then(|_| r.register("random_pooling", || Box::new(RandomPooling)))
            .expect("builtin names are distinct");
        r
    }

    pub fn register(&mut self, name: &'static str, factory: SelectorFactory<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::config(format!(
                "selector `{name}` is already registered"
            )));
        }
        self.entries.insert(name, factory);
        Ok(())
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn LayerSelector<T>>> {
        self.entries.get(name).map(|f| f()).ok_or_else(|| {
            Error::config(format!(
                "unknown selector `{name}` (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}
