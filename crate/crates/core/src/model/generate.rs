// SPDX-License-Identifier: MIT OR Apache-2.0

use super::forward::{forward_batch, validate_tokens, BatchInjection, InjectionSpec};
use super::{ModelConfig, Parameters};
use crate::autograd::{argmax, Graph};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Greedy decoding of one prompt. See [`generate_greedy_batch`].
pub fn generate_greedy<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    prompt: &[usize],
    max_new_tokens: usize,
    injection: Option<&InjectionSpec<T>>,
) -> Result<Vec<usize>> {
    let mut out = generate_greedy_batch(
        params,
        config,
        &[prompt.to_vec()],
        &[injection.cloned()],
        max_new_tokens,
    )?;
    Ok(out.remove(0))
}

/// Greedy decoding of several prompts at once.
///
/// Every prompt must end with the response start token. Decoding stops at
/// the end-of-sequence token (kept in the output), after `max_new_tokens`,
/// or at `max_seq_len`. An injection stays applied at its prompt position
/// on every step, so later tokens see it through attention.
pub fn generate_greedy_batch<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    prompts: &[Vec<usize>],
    injections: &[Option<InjectionSpec<T>>],
    max_new_tokens: usize,
) -> Result<Vec<Vec<usize>>> {
    if injections.len() != prompts.len() {
        return Err(Error::invalid("one injection slot per prompt is required"));
    }
    for (prompt, inj) in prompts.iter().zip(injections) {
        validate_tokens(config, prompt)?;
        if prompt.last() != Some(&config.rst_token_id) {
            return Err(Error::invalid(
                "prompt must end with the response start token",
            ));
        }
        if let Some(spec) = inj {
            if spec.position >= prompt.len() || spec.vector.len() != config.d_model {
                return Err(Error::invalid("injection does not fit its prompt"));
            }
            if spec.layer >= config.n_layers {
                return Err(Error::invalid("injection layer out of range"));
            }
        }
    }
    let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
    let mut done: Vec<bool> = seqs
        .iter()
        .map(|s| max_new_tokens == 0 || s.len() >= config.max_seq_len)
        .collect();
    for _ in 0..max_new_tokens {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let batch: Vec<&[usize]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let mut last_rows = Vec::with_capacity(active.len());
        let mut start = 0;
        let mut inj_rows = Vec::new();
        let mut inj_data = Vec::new();
        let mut inj_key = None;
        for &i in &active {
            if let Some(spec) = &injections[i] {
                let key = (spec.layer, spec.site);
                if *inj_key.get_or_insert(key) != key {
                    return Err(Error::invalid(
                        "batched injections must share layer and site",
                    ));
                }
                inj_rows.push(start + spec.position);
                inj_data.extend_from_slice(&spec.vector);
            }
            start += seqs[i].len();
            last_rows.push(start - 1);
        }
        let injection = match inj_key {
            Some((layer, site)) => {
                let vectors = g.constant(Tensor::matrix(inj_rows.len(), config.d_model, inj_data)?);
                Some(BatchInjection {
                    layer,
                    site,
                    rows: inj_rows,
                    vectors,
                })
            }
            None => None,
        };
        let fwd = forward_batch(
            &mut g,
            &p,
            config,
            &batch,
            injection.as_ref(),
            Some(&last_rows),
        )?;
        let logits = g.value(fwd.logits);
        for (r, &i) in active.iter().enumerate() {
            let next = argmax(logits.row(r));
            seqs[i].push(next);
            if next == config.eos_token_id || seqs[i].len() >= config.max_seq_len {
                done[i] = true;
            }
        }
    }
    Ok(seqs)
}
