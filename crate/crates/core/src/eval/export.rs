// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::{Lang, ParallelExample, TaskKind};
use crate::error::{Error, Result};
use crate::model::{forward_batch, ModelConfig, Parameters};
use crate::store::write_tensor_dir;
use crate::tensor::{Scalar, Tensor};

const BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub id: u64,
    pub lang: Lang,
    pub task: TaskKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpMeta {
    /// Row order of every exported tensor.
    pub records: Vec<DumpRecord>,
    pub layer: usize,
    pub position: String,
    /// Whether `activations_en` holds the parallel prompts, row-aligned.
    pub has_parallel: bool,
}

fn final_block_rows<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    prompts: &[Vec<usize>],
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(prompts.len() * config.d_model);
    for chunk in prompts.chunks(BATCH) {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let mut taps = Vec::with_capacity(chunk.len());
        let mut start = 0;
        for pr in chunk {
            taps.push(start + pr.len() - 2);
            start += pr.len();
        }
        let seqs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let fwd = forward_batch(&mut g, &p, config, &seqs, None, Some(&taps))?;
        let last = *fwd.block.last().expect("at least one layer");
        for &r in &taps {
            out.extend_from_slice(g.value(last).row(r));
        }
    }
    Ok(out)
}

/// Final-layer block outputs at the tap position, one row per example in
/// dataset order; the parallel prompts go to `activations_en` when every
/// record carries one.
pub fn export_activation_dump<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    data: &[ParallelExample],
    dir: &Path,
) -> Result<DumpMeta> {
    if data.is_empty() {
        return Err(Error::invalid("nothing to export"));
    }
    let d = config.d_model;
    let main: Vec<Vec<usize>> = data.iter().map(|e| e.prompt().tokens).collect();
    let a = Tensor::matrix(data.len(), d, final_block_rows(params, config, &main)?)?;
    let has_parallel = data.iter().all(|e| e.x_en.is_some());
    let en = if has_parallel {
        let prompts = data
            .iter()
            .map(|e| e.prompt_en().map(|r| r.tokens))
            .collect::<Result<Vec<_>>>()?;
        Some(Tensor::matrix(
            data.len(),
            d,
            final_block_rows(params, config, &prompts)?,
        )?)
    } else {
        None
    };
    let meta = DumpMeta {
        records: data
            .iter()
            .map(|e| DumpRecord {
                id: e.id,
                lang: e.lang,
                task: e.task,
            })
            .collect(),
        layer: config.n_layers - 1,
        position: "tap".into(),
        has_parallel,
    };
    let mut tensors = vec![("activations".to_string(), &a)];
    if let Some(t) = &en {
        tensors.push(("activations_en".to_string(), t));
    }
    write_tensor_dir(dir, &tensors, serde_json::to_value(&meta)?)?;
    Ok(meta)
}
