// SPDX-License-Identifier: MIT OR Apache-2.0

//! The supervised objective shared by plain fine-tuning and the fused
//! variant: mean negative log-likelihood of the answer span given the
//! prompt. Fusion only changes the logits this function sees.

use crate::autograd::{Graph, NodeId};
use crate::corpus::ParallelExample;
use crate::error::{Error, Result};
use crate::model::{forward_batch, BatchForward, BatchInjection, ModelConfig, ParamNodes};
use crate::tensor::Scalar;

/// Row offsets of each example's teacher-forcing input inside a batch.
pub fn batch_offsets(examples: &[&ParallelExample]) -> Vec<usize> {
    let mut start = 0;
    examples
        .iter()
        .map(|e| {
            let s = start;
            start += e.render().tokens.len() - 1;
            s
        })
        .collect()
}

/// Teacher-forced loss over a batch, averaged over all answer tokens.
pub fn teacher_forced_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamNodes,
    config: &ModelConfig,
    examples: &[&ParallelExample],
    injection: Option<&BatchInjection>,
) -> Result<(NodeId, BatchForward)> {
    if examples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let rendered: Vec<_> = examples.iter().map(|e| e.render()).collect();
    let mut seqs = Vec::with_capacity(rendered.len());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut start = 0;
    for r in &rendered {
        let (inputs, t, mask) = r.training_view();
        for (i, (&tgt, &m)) in t.iter().zip(&mask).enumerate() {
            if m {
                rows.push(start + i);
                targets.push(tgt);
            }
        }
        start += inputs.len();
        seqs.push(inputs);
    }
    let fwd = forward_batch(g, params, config, &seqs, injection, Some(&rows))?;
    let mask = vec![true; targets.len()];
    let loss = g.cross_entropy(fwd.logits, &targets, &mask)?;
    Ok((loss, fwd))
}
