// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub ffn_up: Tensor<T>,
    pub ffn_down: Tensor<T>,
}

/// Weights of the toy transformer. The output projection is untied from
/// the token embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
    pub unembed: Tensor<T>,
}

/// Graph handles for a bound [`Parameters`].
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub tok_emb: NodeId,
    pub pos_emb: NodeId,
    pub layers: Vec<LayerNodes>,
    pub final_gain: NodeId,
    pub final_bias: NodeId,
    pub unembed: NodeId,
}

#[derive(Clone, Debug)]
pub struct LayerNodes {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub ffn_up: NodeId,
    pub ffn_down: NodeId,
}

impl ParamNodes {
    /// Node ids in the same order as [`Parameters::named`].
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.wk, l.wv, l.wo, l.ln2_gain, l.ln2_bias, l.ffn_up,
                l.ffn_down,
            ]);
        }
        out.extend([self.final_gain, self.final_bias, self.unembed]);
        out
    }
}

const LAYER_FIELDS: [&str; 10] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias",
    "ffn.up", "ffn.down",
];

impl<T: Scalar> Parameters<T> {
    /// Scaled normal initialization: std `init_std`, residual projections
    /// (`attn.wo`, `ffn.down`) further scaled by `1/√(2L)`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = config.init_std;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ffn);
        let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor<T> {
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols)
                .map(|_| T::lit(dist.sample(&mut rng)))
                .collect();
            Tensor::matrix(rows, cols, data).expect("positive extents")
        };
        let tok_emb = normal(v, d, std);
        let pos_emb = normal(config.max_seq_len, d, std);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::filled(&[1, d], T::one()),
                ln1_bias: Tensor::zeros(&[1, d]),
                wq: normal(d, d, std),
                wk: normal(d, d, std),
                wv: normal(d, d, std),
                wo: normal(d, d, resid_std),
                ln2_gain: Tensor::filled(&[1, d], T::one()),
                ln2_bias: Tensor::zeros(&[1, d]),
                ffn_up: normal(d, f, std),
                ffn_down: normal(f, d, resid_std),
            })
            .collect();
        let unembed = normal(d, v, std);
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            final_gain: Tensor::filled(&[1, d], T::one()),
            final_bias: Tensor::zeros(&[1, d]),
            unembed,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let fields = [
                &l.ln1_gain,
                &l.ln1_bias,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.ffn_up,
                &l.ffn_down,
            ];
            for (name, t) in LAYER_FIELDS.iter().zip(fields) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final.gain".into(), &self.final_gain));
        out.push(("final.bias".into(), &self.final_bias));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.ffn_up,
                &mut l.ffn_down,
            ]);
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.unembed,
        ]);
        out
    }

    /// Rebuilds parameters from tensors in [`Parameters::named`] order.
    pub fn from_ordered(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let template = Self::init(config)?;
        let expected: Vec<(String, Vec<usize>)> = template
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint {
                    name: name.clone(),
                    msg: format!(
                        "shape {:?} does not match config shape {shape:?}",
                        t.shape()
                    ),
                });
            }
        }
        let mut out = template;
        for (slot, t) in out.tensors_mut().into_iter().zip(tensors) {
            *slot = t;
        }
        Ok(out)
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let c = |t: &Tensor<T>| t.cast::<U>();
        Parameters {
            tok_emb: c(&self.tok_emb),
            pos_emb: c(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: c(&l.ln1_gain),
                    ln1_bias: c(&l.ln1_bias),
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    ln2_gain: c(&l.ln2_gain),
                    ln2_bias: c(&l.ln2_bias),
                    ffn_up: c(&l.ffn_up),
                    ffn_down: c(&l.ffn_down),
                })
                .collect(),
            final_gain: c(&self.final_gain),
            final_bias: c(&self.final_bias),
            unembed: c(&self.unembed),
        }
    }

    /// Places every tensor in `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ParamNodes {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        ParamNodes {
            tok_emb: put(&self.tok_emb),
            pos_emb: put(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerNodes {
                    ln1_gain: put(&l.ln1_gain),
                    ln1_bias: put(&l.ln1_bias),
                    wq: put(&l.wq),
                    wk: put(&l.wk),
                    wv: put(&l.wv),
                    wo: put(&l.wo),
                    ln2_gain: put(&l.ln2_gain),
                    ln2_bias: put(&l.ln2_bias),
                    ffn_up: put(&l.ffn_up),
                    ffn_down: put(&l.ffn_down),
                })
                .collect(),
            final_gain: put(&self.final_gain),
            final_bias: put(&self.final_bias),
            unembed: put(&self.unembed),
        }
    }

    /// Binds a caller-supplied node list (in [`Parameters::named`] order) as
    /// the parameter handles.
    pub fn nodes_from_ordered(config: &ModelConfig, ids: &[NodeId]) -> Result<ParamNodes> {
        let per = LAYER_FIELDS.len();
        if ids.len() != 2 + config.n_layers * per + 3 {
            return Err(Error::invalid(
                "node list does not match the parameter layout",
            ));
        }
        let layers = (0..config.n_layers)
            .map(|i| {
                let s = &ids[2 + i * per..2 + (i + 1) * per];
                LayerNodes {
                    ln1_gain: s[0],
                    ln1_bias: s[1],
                    wq: s[2],
                    wk: s[3],
                    wv: s[4],
                    wo: s[5],
                    ln2_gain: s[6],
                    ln2_bias: s[7],
                    ffn_up: s[8],
                    ffn_down: s[9],
                }
            })
            .collect();
        let tail = &ids[ids.len() - 3..];
        Ok(ParamNodes {
            tok_emb: ids[0],
            pos_emb: ids[1],
            layers,
            final_gain: tail[0],
            final_bias: tail[1],
            unembed: tail[2],
        })
    }
}
