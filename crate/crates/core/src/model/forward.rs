// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EmbeddingPooling, ModelConfig, ParamNodes, Parameters};
use crate::autograd::{Graph, NodeId, Segment};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Residual component a fusion vector is added to (and read from).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Feed-forward residual output `f`.
    #[default]
    Ffn,
    /// Self-attention residual output `a`.
    Attn,
    /// Whole decoder block output `o`.
    Block,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::Ffn, Site::Attn, Site::Block];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::Ffn => "ffn",
            Site::Attn => "attn",
            Site::Block => "block",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ffn" => Ok(Site::Ffn),
            "attn" => Ok(Site::Attn),
            "block" => Ok(Site::Block),
            other => Err(Error::config(format!(
                "unknown fusion site `{other}` (ffn | attn | block)"
            ))),
        }
    }
}

/// Additive injection into a batched forward pass: row `rows[i]` of the
/// chosen component at `layer` receives row `i` of `vectors`.
#[derive(Clone, Debug)]
pub struct BatchInjection {
    pub layer: usize,
    pub site: Site,
    pub rows: Vec<usize>,
    pub vectors: NodeId,
}

/// Graph handles produced by [`forward_batch`]. Per-layer entries are
/// `N×d` over the stacked rows of every sequence.
#[derive(Clone, Debug)]
pub struct BatchForward {
    pub segments: Vec<Segment>,
    pub embed: NodeId,
    pub layer_inputs: Vec<NodeId>,
    pub attn: Vec<NodeId>,
    pub ffn: Vec<NodeId>,
    pub block: Vec<NodeId>,
    pub logits: NodeId,
}

impl BatchForward {
    pub fn site_outputs(&self, site: Site) -> &[NodeId] {
        match site {
            Site::Ffn => &self.ffn,
            Site::Attn => &self.attn,
            Site::Block => &self.block,
        }
    }

    /// Global row index of `position` inside sequence `seq`.
    pub fn row(&self, seq: usize, position: usize) -> usize {
        self.segments[seq].start + position
    }

    /// `k×d` embedding feature per sequence: the tap-position embedding or
    /// the mean embedding over positions `0..=tap`.
    pub fn embedding_feature<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        seqs: &[usize],
        taps: &[usize],
        pooling: EmbeddingPooling,
    ) -> Result<NodeId> {
        match pooling {
            EmbeddingPooling::Tap => {
                let rows: Vec<usize> = seqs
                    .iter()
                    .zip(taps)
                    .map(|(&s, &t)| self.row(s, t))
                    .collect();
                g.gather_rows(self.embed, &rows)
            }
            EmbeddingPooling::Mean => {
                let n = g.value(self.embed).rows();
                let mut avg = Tensor::zeros(&[seqs.len(), n]);
                for (i, (&s, &t)) in seqs.iter().zip(taps).enumerate() {
                    let w = T::one() / T::from_usize(t + 1).unwrap();
                    for p in 0..=t {
                        avg.row_mut(i)[self.row(s, p)] = w;
                    }
                }
                let avg = g.constant(avg);
                g.matmul(avg, self.embed)
            }
        }
    }
}

pub(crate) fn validate_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {t} outside vocab of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Causal LM forward over a ragged batch of sequences stacked row-wise.
///
/// Each layer is pre-norm: `a = Attn(LN(h))`, `f = FFN(LN(h + a))`,
/// `o = h + a + f`. With `logit_rows`, only those rows are projected to
/// the vocabulary.
pub fn forward_batch<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    config: &ModelConfig,
    seqs: &[&[usize]],
    injection: Option<&BatchInjection>,
    logit_rows: Option<&[usize]>,
) -> Result<BatchForward> {
    if seqs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    for s in seqs {
        validate_tokens(config, s)?;
        segments.push(Segment {
            start: ids.len(),
            len: s.len(),
        });
        ids.extend_from_slice(s);
        positions.extend(0..s.len());
    }
    let n_rows = ids.len();

    let inject = match injection {
        Some(inj) => {
            if inj.layer >= config.n_layers {
                return Err(Error::invalid(format!(
                    "injection layer {} out of range for {} layers",
                    inj.layer, config.n_layers
                )));
            }
            let v = g.value(inj.vectors);
            if v.cols() != config.d_model || v.rows() != inj.rows.len() {
                return Err(Error::ShapeMismatch {
                    op: "injection",
                    left: v.shape().to_vec(),
                    right: vec![inj.rows.len(), config.d_model],
                });
            }
            Some((inj, g.scatter_rows(inj.vectors, &inj.rows, n_rows)?))
        }
        None => None,
    };
    let maybe_inject =
        |g: &mut Graph<T>, node: NodeId, layer: usize, site: Site| -> Result<NodeId> {
            match inject {
                Some((inj, full)) if inj.layer == layer && inj.site == site => g.add(node, full),
                _ => Ok(node),
            }
        };

    let eps = T::lit(config.ln_eps);
    let tok = g.embedding(p.tok_emb, &ids)?;
    let pos = g.embedding(p.pos_emb, &positions)?;
    let embed = g.add(tok, pos)?;

    let mut h = embed;
    let (mut layer_inputs, mut attn, mut ffn, mut block) = (vec![], vec![], vec![], vec![]);
    for (l, lp) in p.layers.iter().enumerate() {
        layer_inputs.push(h);
        let x = g.layer_norm(h, lp.ln1_gain, lp.ln1_bias, eps)?;
        let q = g.matmul(x, lp.wq)?;
        let k = g.matmul(x, lp.wk)?;
        let v = g.matmul(x, lp.wv)?;
        let ctx = g.causal_attention(q, k, v, &segments, config.n_heads)?;
        let a = g.matmul(ctx, lp.wo)?;
        let a = maybe_inject(g, a, l, Site::Attn)?;
        let mid = g.add(h, a)?;

        let x = g.layer_norm(mid, lp.ln2_gain, lp.ln2_bias, eps)?;
        let up = g.matmul(x, lp.ffn_up)?;
        let act = g.silu(up);
        let f = g.matmul(act, lp.ffn_down)?;
        let f = maybe_inject(g, f, l, Site::Ffn)?;
        let o = g.add(mid, f)?;
        let o = maybe_inject(g, o, l, Site::Block)?;

        attn.push(a);
        ffn.push(f);
        block.push(o);
        h = o;
    }

    let top = match logit_rows {
        Some(rows) => g.gather_rows(h, rows)?,
        None => h,
    };
    let normed = g.layer_norm(top, p.final_gain, p.final_bias, eps)?;
    let logits = g.matmul(normed, p.unembed)?;
    Ok(BatchForward {
        segments,
        embed,
        layer_inputs,
        attn,
        ffn,
        block,
        logits,
    })
}

/// Injection into a single-sequence forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionSpec<T> {
    pub layer: usize,
    pub position: usize,
    pub vector: Vec<T>,
    pub site: Site,
}

/// Per-layer activations read at one position of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace<T> {
    pub tap_position: usize,
    /// Embedding-layer output at the tap position (or pooled, per config).
    pub embedding: Vec<T>,
    pub layer_input: Vec<Vec<T>>,
    pub attn: Vec<Vec<T>>,
    pub ffn: Vec<Vec<T>>,
    pub block: Vec<Vec<T>>,
}

impl<T: Scalar> ActivationTrace<T> {
    pub fn site(&self, site: Site) -> &[Vec<T>] {
        match site {
            Site::Ffn => &self.ffn,
            Site::Attn => &self.attn,
            Site::Block => &self.block,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.ffn.len()
    }

    /// Reads the trace of sequence `seq` at `tap` out of a finished pass.
    pub fn capture(
        g: &Graph<T>,
        fwd: &BatchForward,
        seq: usize,
        tap: usize,
        pooling: EmbeddingPooling,
    ) -> Self {
        let row = fwd.row(seq, tap);
        let take = |ids: &[NodeId]| {
            ids.iter()
                .map(|&id| g.value(id).row(row).to_vec())
                .collect::<Vec<_>>()
        };
        let emb = g.value(fwd.embed);
        let embedding = match pooling {
            EmbeddingPooling::Tap => emb.row(row).to_vec(),
            EmbeddingPooling::Mean => {
                let start = fwd.segments[seq].start;
                let mut acc = vec![T::zero(); emb.cols()];
                for r in start..=row {
                    for (a, &b) in acc.iter_mut().zip(emb.row(r)) {
                        *a = *a + b;
                    }
                }
                let inv = T::one() / T::from_usize(tap + 1).unwrap();
                acc.into_iter().map(|x| x * inv).collect()
            }
        };
        Self {
            tap_position: tap,
            embedding,
            layer_input: take(&fwd.layer_inputs),
            attn: take(&fwd.attn),
            ffn: take(&fwd.ffn),
            block: take(&fwd.block),
        }
    }
}

/// Hooks for one forward pass: an optional tap and at most one injection.
#[derive(Clone, Debug, Default)]
pub struct Hooks<T> {
    tap: Option<usize>,
    injection: Option<InjectionSpec<T>>,
}

impl<T: Scalar> Hooks<T> {
    pub fn new() -> Self {
        Self {
            tap: None,
            injection: None,
        }
    }

    pub fn tap(mut self, position: usize) -> Self {
        self.tap = Some(position);
        self
    }

    /// Registers the pass's injection; a second one is rejected.
    pub fn inject(&mut self, spec: InjectionSpec<T>) -> Result<()> {
        if self.injection.is_some() {
            return Err(Error::invalid("a forward pass accepts a single injection"));
        }
        self.injection = Some(spec);
        Ok(())
    }

    pub fn with_injection(mut self, spec: InjectionSpec<T>) -> Result<Self> {
        self.inject(spec)?;
        Ok(self)
    }

    pub fn injection(&self) -> Option<&InjectionSpec<T>> {
        self.injection.as_ref()
    }

    pub fn tap_position(&self) -> Option<usize> {
        self.tap
    }
}

/// Plain causal forward of one sequence with optional tap and injection.
/// Returns `T×V` logits and the trace when a tap was requested.
pub fn forward_with_hooks<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    tokens: &[usize],
    hooks: &Hooks<T>,
) -> Result<(Tensor<T>, Option<ActivationTrace<T>>)> {
    validate_tokens(config, tokens)?;
    if let Some(tap) = hooks.tap {
        if tap >= tokens.len() {
            return Err(Error::invalid(format!(
                "tap position {tap} out of range for {} tokens",
                tokens.len()
            )));
        }
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let injection = match &hooks.injection {
        Some(spec) => Some(single_injection(&mut g, config, spec, tokens.len())?),
        None => None,
    };
    let fwd = forward_batch(&mut g, &p, config, &[tokens], injection.as_ref(), None)?;
    let trace = hooks
        .tap
        .map(|tap| ActivationTrace::capture(&g, &fwd, 0, tap, config.embedding_pooling));
    Ok((g.value(fwd.logits).clone(), trace))
}

pub(crate) fn single_injection<T: Scalar>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    spec: &InjectionSpec<T>,
    len: usize,
) -> Result<BatchInjection> {
    if spec.position >= len {
        return Err(Error::invalid(format!(
            "injection position {} out of range for {len} tokens",
            spec.position
        )));
    }
    if spec.vector.len() != config.d_model {
        return Err(Error::ShapeMismatch {
            op: "injection",
            left: vec![spec.vector.len()],
            right: vec![config.d_model],
        });
    }
    let vectors = g.constant(Tensor::row_vector(spec.vector.clone()));
    Ok(BatchInjection {
        layer: spec.layer,
        site: spec.site,
        rows: vec![spec.position],
        vectors,
    })
}
