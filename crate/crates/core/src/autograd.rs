// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is the computation record: nodes are appended in execution
//! order, so the node list is already topologically sorted and backward is
//! one reverse sweep. Leaf gradients persist across [`Graph::backward`]
//! calls and accumulate until [`Graph::zero_grad`].

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows that attend only to each other (one sequence
/// of a ragged batch).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Silu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<Vec<T>>,
    },
    RowSoftmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    GatherRows {
        src: NodeId,
        rows: Vec<usize>,
    },
    ScatterRows {
        src: NodeId,
        rows: Vec<usize>,
    },
    StraightThrough(NodeId),
    RowMix {
        weights: NodeId,
        layers: Vec<NodeId>,
    },
    Mean(Vec<NodeId>),
    Sum(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Computation record plus the values it produced.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (x, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *x = *x * y;
        }
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1×n` (or length-n) bias to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = self.value(a).cols();
        if self.value(bias).len() != n {
            return Err(mismatch("add_row", self.shape(a), self.shape(bias)));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..out.rows() {
            for (x, &y) in out.row_mut(r).iter_mut().zip(&b) {
                *x = *x + y;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let input = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = input.rows();
        let dt = T::from_usize(d).unwrap();
        let mut out = Tensor::zeros(input.shape());
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for table of {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Causal multi-head scaled dot-product attention over a ragged batch.
    ///
    /// `q`, `k`, `v` are `N×d`; each segment is an independent sequence and
    /// a row attends only to rows at or before it in its own segment.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[Segment],
        heads: usize,
    ) -> Result<NodeId> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(mismatch("attention", &shape, self.shape(k)));
        }
        let (n, d) = (shape[0], shape[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if covered != n || segments.iter().any(|s| s.start + s.len > n) {
            return Err(Error::invalid("attention segments do not tile the rows"));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(&[n, d]);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let len = seg.len;
            for h in 0..heads {
                let off = h * dh;
                // lower-triangular probabilities, row i has i+1 entries
                let mut p = vec![T::zero(); len * (len + 1) / 2];
                for i in 0..len {
                    let qi = &qv.row(seg.start + i)[off..off + dh];
                    let base = i * (i + 1) / 2;
                    let scores = &mut p[base..base + i + 1];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kv.row(seg.start + j)[off..off + dh];
                        *s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    }
                    softmax_in_place(scores);
                    let o = &mut out.row_mut(seg.start + i)[off..off + dh];
                    for (j, &w) in scores.iter().enumerate() {
                        let vj = &vv.row(seg.start + j)[off..off + dh];
                        for (x, &y) in o.iter_mut().zip(vj) {
                            *x = *x + w * y;
                        }
                    }
                }
                probs.push(p);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Softmax over each row.
    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::RowSoftmax(a), &[a])
    }

    /// Mean negative log-likelihood over the rows where `mask` is set.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(mismatch(
                "cross_entropy",
                lv.shape(),
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid(
                "cross entropy over an all-masked input is undefined",
            ));
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= vocab {
                return Err(Error::invalid(format!(
                    "target {} out of range for vocab {vocab}",
                    targets[r]
                )));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[targets[r]]);
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn gather_rows(&mut self, src: NodeId, rows: &[usize]) -> Result<NodeId> {
        let s = self.value(src);
        if let Some(&bad) = rows.iter().find(|&&r| r >= s.rows()) {
            return Err(Error::invalid(format!(
                "row {bad} out of range for {} rows",
                s.rows()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * s.cols());
        for &r in rows {
            data.extend_from_slice(s.row(r));
        }
        let out = Tensor::matrix(rows.len(), s.cols(), data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
            &[src],
        ))
    }

    /// `n_rows×d` matrix that is zero except row `rows[i]` = `src[i]`.
    /// Target rows must be distinct.
    pub fn scatter_rows(&mut self, src: NodeId, rows: &[usize], n_rows: usize) -> Result<NodeId> {
        let s = self.value(src);
        if rows.len() != s.rows() {
            return Err(mismatch("scatter_rows", s.shape(), &[rows.len()]));
        }
        let mut seen = vec![false; n_rows];
        for &r in rows {
            if r >= n_rows || std::mem::replace(&mut seen[r], true) {
                return Err(Error::invalid(format!(
                    "scatter target row {r} is out of range or repeated"
                )));
            }
        }
        let mut out = Tensor::zeros(&[n_rows, s.cols()]);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(i));
        }
        Ok(self.push(
            out,
            Op::ScatterRows {
                src,
                rows: rows.to_vec(),
            },
            &[src],
        ))
    }

    /// Forward: one-hot of each row's argmax (lowest index on ties).
    /// Backward: identity, so gradients reach the soft weights.
    pub fn straight_through_onehot(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut out = Tensor::zeros(src.shape());
        for r in 0..src.rows() {
            let idx = argmax(src.row(r));
            out.row_mut(r)[idx] = T::one();
        }
        self.push(out, Op::StraightThrough(a), &[a])
    }

    /// `out[i] = Σ_l weights[i][l] · layers[l][i]`.
    pub fn row_mix(&mut self, weights: NodeId, layers: &[NodeId]) -> Result<NodeId> {
        let w = self.value(weights);
        if layers.is_empty() || w.cols() != layers.len() {
            return Err(mismatch("row_mix", w.shape(), &[layers.len()]));
        }
        let shape = self.shape(layers[0]).to_vec();
        for &l in layers {
            if self.shape(l) != shape.as_slice() || self.value(l).rows() != w.rows() {
                return Err(mismatch("row_mix", &shape, self.shape(l)));
            }
        }
        let mut out = Tensor::zeros(&shape);
        for i in 0..w.rows() {
            let wr = w.row(i);
            let o = out.row_mut(i);
            for (li, &l) in layers.iter().enumerate() {
                let src = self.nodes[l.0].value.row(i);
                for (x, &y) in o.iter_mut().zip(src) {
                    *x = *x + wr[li] * y;
                }
            }
        }
        let mut inputs = vec![weights];
        inputs.extend_from_slice(layers);
        Ok(self.push(
            out,
            Op::RowMix {
                weights,
                layers: layers.to_vec(),
            },
            &inputs,
        ))
    }

    /// Elementwise mean of same-shape nodes.
    pub fn mean_of(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("mean of zero tensors"))?;
        let shape = self.shape(first).to_vec();
        let mut out = Tensor::zeros(&shape);
        for &i in inputs {
            if self.shape(i) != shape.as_slice() {
                return Err(mismatch("mean_of", &shape, self.shape(i)));
            }
            out.add_assign(self.value(i));
        }
        let inv = T::one() / T::from_usize(inputs.len()).unwrap();
        let out = out.map(|x| x * inv);
        Ok(self.push(out, Op::Mean(inputs.to_vec()), inputs))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Backpropagates from the scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let mut send = |target: NodeId, contrib: Tensor<T>| {
            if !nodes[target.0].requires_grad {
                return;
            }
            match &mut grads[target.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        };
        let val = |n: NodeId| &nodes[n.0].value;
        let wants = |n: NodeId| nodes[n.0].requires_grad;

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    T::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        bv.data(),
                        true,
                        da.data_mut(),
                        false,
                    );
                    send(*a, da);
                }
                if wants(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    T::gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        true,
                        g.data(),
                        false,
                        db.data_mut(),
                        false,
                    );
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = g.clone();
                for (x, &y) in da.data_mut().iter_mut().zip(bv.data()) {
                    *x = *x * y;
                }
                let mut db = g.clone();
                for (x, &y) in db.data_mut().iter_mut().zip(av.data()) {
                    *x = *x * y;
                }
                send(*a, da);
                send(*b, db);
            }
            Op::AddRow(a, bias) => {
                send(*a, g.clone());
                if wants(*bias) {
                    let mut db = Tensor::zeros(val(*bias).shape());
                    for r in 0..g.rows() {
                        for (x, &y) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *x = *x + y;
                        }
                    }
                    send(*bias, db);
                }
            }
            Op::Scale(a, f) => send(*a, g.map(|x| x * *f)),
            Op::Silu(a) => {
                let x = val(*a);
                let mut da = g.clone();
                for (d, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                    let s = sigmoid(xv);
                    *d = *d * s * (T::one() + xv * (T::one() - s));
                }
                send(*a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain).data();
                let (rows, d) = (g.rows(), g.cols());
                let dt = T::from_usize(d).unwrap();
                let mut dgain = Tensor::zeros(val(*gain).shape());
                let mut dbias = Tensor::zeros(val(*bias).shape());
                let mut dx = Tensor::zeros(g.shape());
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        dgain.data_mut()[j] = dgain.data()[j] + gr[j] * xh[j];
                        dbias.data_mut()[j] = dbias.data()[j] + gr[j];
                        let dxh = gr[j] * gv[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
                    }
                    mean_dxh = mean_dxh / dt;
                    mean_dxh_xh = mean_dxh_xh / dt;
                    let out = dx.row_mut(r);
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        out[j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                send(*x, dx);
                send(*gain, dgain);
                send(*bias, dbias);
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let mut dt = Tensor::zeros(val(*table).shape());
                    for (r, &i) in ids.iter().enumerate() {
                        for (x, &y) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *x = *x + y;
                        }
                    }
                    send(*table, dt);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let d = qv.cols();
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let mut dq = Tensor::zeros(qv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                let mut pi = 0;
                for seg in segments {
                    let len = seg.len;
                    for h in 0..*heads {
                        let off = h * dh;
                        let p = &probs[pi];
                        pi += 1;
                        for i in 0..len {
                            let base = i * (i + 1) / 2;
                            let prow = &p[base..base + i + 1];
                            let go = &g.row(seg.start + i)[off..off + dh];
                            // dP_ij = dO_i · V_j, then softmax backward
                            let mut dp = vec![T::zero(); i + 1];
                            let mut dot = T::zero();
                            for j in 0..=i {
                                let vj = &vv.row(seg.start + j)[off..off + dh];
                                dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                                dot = dot + dp[j] * prow[j];
                                let dvj = &mut dv.row_mut(seg.start + j)[off..off + dh];
                                for (x, &y) in dvj.iter_mut().zip(go) {
                                    *x = *x + prow[j] * y;
                                }
                            }
                            let qi = &qv.row(seg.start + i)[off..off + dh];
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let kj = &kv.row(seg.start + j)[off..off + dh];
                                let dqi = &mut dq.row_mut(seg.start + i)[off..off + dh];
                                for (x, &y) in dqi.iter_mut().zip(kj) {
                                    *x = *x + ds * y;
                                }
                                let dkj = &mut dk.row_mut(seg.start + j)[off..off + dh];
                                for (x, &y) in dkj.iter_mut().zip(qi) {
                                    *x = *x + ds * y;
                                }
                            }
                        }
                    }
                }
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
            Op::RowSoftmax(a) => {
                let y = &nodes[id].value;
                let mut da = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((x, &yv), &gv) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *x = yv * (gv - dot);
                    }
                }
                send(*a, da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let lv = val(*logits);
                let vocab = lv.cols();
                let coef = g.item() / T::from_usize(*count).unwrap();
                let mut dl = Tensor::zeros(lv.shape());
                for r in 0..lv.rows() {
                    if !mask[r] {
                        continue;
                    }
                    let out = dl.row_mut(r);
                    for (x, &p) in out.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *x = p * coef;
                    }
                    out[targets[r]] = out[targets[r]] - coef;
                }
                send(*logits, dl);
            }
            Op::GatherRows { src, rows } => {
                let mut ds = Tensor::zeros(val(*src).shape());
                for (i, &r) in rows.iter().enumerate() {
                    for (x, &y) in ds.row_mut(r).iter_mut().zip(g.row(i)) {
                        *x = *x + y;
                    }
                }
                send(*src, ds);
            }
            Op::ScatterRows { src, rows } => {
                let mut ds = Tensor::zeros(val(*src).shape());
                for (i, &r) in rows.iter().enumerate() {
                    ds.row_mut(i).copy_from_slice(g.row(r));
                }
                send(*src, ds);
            }
            Op::StraightThrough(a) => send(*a, g.clone()),
            Op::RowMix { weights, layers } => {
                let wv = val(*weights);
                if wants(*weights) {
                    let mut dw = Tensor::zeros(wv.shape());
                    for i in 0..wv.rows() {
                        let gr = g.row(i);
                        for (l, &node) in layers.iter().enumerate() {
                            dw.row_mut(i)[l] =
                                gr.iter().zip(val(node).row(i)).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    send(*weights, dw);
                }
                for (l, &node) in layers.iter().enumerate() {
                    if !wants(node) {
                        continue;
                    }
                    let mut dx = Tensor::zeros(g.shape());
                    for i in 0..wv.rows() {
                        let w = wv.row(i)[l];
                        for (x, &y) in dx.row_mut(i).iter_mut().zip(g.row(i)) {
                            *x = w * y;
                        }
                    }
                    send(node, dx);
                }
            }
            Op::Mean(inputs) => {
                let inv = T::one() / T::from_usize(inputs.len()).unwrap();
                let share = g.map(|x| x * inv);
                for &i in inputs {
                    send(i, share.clone());
                }
            }
            Op::Sum(a) => send(*a, Tensor::filled(val(*a).shape(), g.item())),
        }
    }
}

/// Index of the largest entry; the lowest index wins on exact ties.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of a slice, outside any graph.
pub fn softmax<T: Scalar>(xs: &[T]) -> Result<Vec<T>> {
    if xs.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Layer normalization of a single vector, outside any graph.
pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let d = x.len();
    let xn = g.constant(Tensor::matrix(1, d, x.to_vec())?);
    let gn = g.constant(Tensor::matrix(1, gain.len(), gain.to_vec())?);
    let bn = g.constant(Tensor::matrix(1, bias.len(), bias.to_vec())?);
    let out = g.layer_norm(xn, gn, bn, eps)?;
    Ok(g.value(out).data().to_vec())
}

/// Masked mean negative log-likelihood, outside any graph.
pub fn cross_entropy_nll<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets, mask)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0f64, 0.0, 0.0]).unwrap();
        assert!(s.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax(&[1000.0f64, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-9 && s[1].abs() < 1e-9);
        let s = softmax(&[1.0f64, 2.0, 3.0]).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s[i] - x.exp() / z).abs() < 1e-12);
        }
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[5.0f64; 4], &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(out.iter().all(|x| x.abs() < 1e-12));
        let out = layer_norm(&[1.0f64, -1.0], &[1.0; 2], &[0.0; 2], 1e-5).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-5 && (out[1] + 1.0).abs() < 1e-5);
        let out = layer_norm(&[1.0f64, -1.0], &[2.0; 2], &[1.0; 2], 1e-5).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-4 && (out[1] + 1.0).abs() < 1e-4);
        let x = [0.3f64, -1.2, 4.0, 2.2, 0.0];
        let out = layer_norm(&x, &[1.0; 5], &[0.0; 5], 1e-5).unwrap();
        let mean = out.iter().sum::<f64>() / 5.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::<f64>::zeros(&[1, 4]);
        let l = cross_entropy_nll(&uniform, &[2], &[true]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let mut sharp = Tensor::<f64>::zeros(&[1, 4]);
        sharp.data_mut()[1] = 30.0;
        assert!(cross_entropy_nll(&sharp, &[1], &[true]).unwrap() < 1e-9);

        let logits =
            Tensor::<f64>::matrix(3, 3, vec![0.1, 0.5, -0.3, 1.0, 0.0, 2.0, -1.0, 0.7, 0.2])
                .unwrap();
        let masked = cross_entropy_nll(&logits, &[0, 2, 1], &[false, true, true]).unwrap();
        let tail = Tensor::matrix(2, 3, logits.data()[3..].to_vec()).unwrap();
        let direct = cross_entropy_nll(&tail, &[2, 1], &[true, true]).unwrap();
        assert!((masked - direct).abs() < 1e-15);

        assert!(cross_entropy_nll(&logits, &[0, 0, 0], &[false; 3]).is_err());
    }

    #[test]
    fn backward_linear_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::row_vector(vec![1.0, 2.0]));
        let w = g.param(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::row_vector(vec![1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn straight_through_ties_pick_lowest() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::row_vector(vec![0.5, 0.5, 0.1]));
        let h = g.straight_through_onehot(x);
        assert_eq!(g.value(h).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn scatter_rejects_repeated_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        assert!(g.scatter_rows(x, &[1, 1], 4).is_err());
        assert!(g.scatter_rows(x, &[1, 4], 4).is_err());
    }
}
