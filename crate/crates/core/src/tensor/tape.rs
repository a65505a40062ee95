//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied; [`Tape::backward`]
//! returns the gradients, which the caller folds into the store with
//! [`ParamStore::accumulate`].

use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::{dot, gemm, pairwise_sum, Tensor, View};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f32>, count: usize },
    Mse(Var, Var),
    Cosine { a: Var, b: Var, na: Vec<f32>, nb: Vec<f32> },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Dropout { x: Var, mask: Vec<f32> },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    SumAll(Var),
    MeanAll(Var),
    WeightedRows { x: Var, weights: Tensor },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    train: bool,
}

/// Result of a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f32>>,
    leaves: BTreeMap<usize, Vec<f32>>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f32]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    #[cfg(test)]
    pub(crate) fn insert_param(&mut self, id: ParamId, g: Vec<f32>) {
        self.params.insert(id, g);
    }

    /// Gradient of an input created with [`Tape::input`].
    pub fn leaf(&self, v: Var) -> Option<&[f32]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape { op, left: a.to_vec(), right: b.to_vec() }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; inputs only.
    pub fn new(train: bool) -> Tape<'static> {
        Tape { params: None, nodes: Vec::new(), train }
    }

    pub fn with_params(params: &'p ParamStore, train: bool) -> Tape<'p> {
        Tape { params: Some(params), nodes: Vec::new(), train }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("parameter node on a tape without a store").value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input leaf; with `requires_grad` its gradient is reported by
    /// [`Gradients::leaf`].
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "tape has no parameter store");
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let t = Tensor { shape: x.shape().to_vec(), data };
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `a + b` with `b` a vector broadcast over the rows of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xb.numel() != xa.cols() {
            return Err(shape_err("add_bias", xa.shape(), xb.shape()));
        }
        let c = xa.cols();
        let bias = xb.data();
        let mut data = xa.data().to_vec();
        for row in data.chunks_mut(c) {
            add_into(row, bias);
        }
        let t = Tensor { shape: xa.shape().to_vec(), data };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::AddBias(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.shape().len() != 2 || xb.shape().len() != 2 || xa.shape()[1] != xb.shape()[0] {
            return Err(shape_err("matmul", xa.shape(), xb.shape()));
        }
        let (m, k, n) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(View::new(xa.data(), m, k), View::new(xb.data(), k, n), &mut out, 0.0);
        let t = Tensor { shape: vec![m, n], data: out };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// Batched product `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ`
    /// with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        let (sa, sb) = (xa.shape(), xb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("bmm", sa, sb));
        }
        let mut out = vec![0.0; bt * m * n];
        for i in 0..bt {
            let av = View::new(&xa.data()[i * m * k..(i + 1) * m * k], m, k);
            let bd = &xb.data()[i * k * n..(i + 1) * k * n];
            let bv = if trans_b { View::new(bd, n, k).t() } else { View::new(bd, k, n) };
            gemm(av, bv, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let t = Tensor { shape: vec![bt, m, n], data: out };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Bmm { a, b, trans_b }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let n: usize = shape.iter().product();
        if n != x.numel() {
            return Err(shape_err("reshape", x.shape(), shape));
        }
        let t = Tensor { shape: shape.to_vec(), data: x.data().to_vec() };
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err("permute", shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(x.data(), shape, perm);
        let t = Tensor { shape: out_shape, data };
        let ng = self.ng(a);
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), ng))
    }

    /// Rows of a `[V, D]` table selected by `ids`, giving `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let x = self.value(table);
        if x.shape().len() != 2 {
            return Err(shape_err("embedding", x.shape(), &[ids.len()]));
        }
        let (v, d) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::Shape { op: "embedding index", left: vec![v], right: vec![i] });
            }
            data.extend_from_slice(x.row(i));
        }
        let t = Tensor { shape: vec![ids.len(), d], data };
        let ng = self.ng(table);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor { shape: x.shape().to_vec(), data };
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor { shape: x.shape().to_vec(), data };
        let ng = self.ng(a);
        self.push(t, Op::LogSoftmax(a), ng)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// averaged over rows whose target is not `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let x = self.value(logits);
        let (r, c) = (x.rows(), x.cols());
        if targets.len() != r {
            return Err(shape_err("cross_entropy", x.shape(), &[targets.len()]));
        }
        let mut probs = x.data().to_vec();
        let mut losses = Vec::with_capacity(r);
        let mut kept = Vec::with_capacity(r);
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let t = targets[i];
            if Some(t) == ignore {
                kept.push(None);
                continue;
            }
            if t >= c {
                return Err(Error::Shape { op: "cross_entropy target", left: vec![c], right: vec![t] });
            }
            let lse = log_sum_exp(row);
            losses.push(lse - row[t]);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
            kept.push(Some(t));
        }
        let count = losses.len();
        let loss = if count == 0 { 0.0 } else { pairwise_sum(&losses) / count as f32 };
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: kept, probs, count }, ng))
    }

    /// Mean over all elements of `(a - b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mse", a, b)?;
        let sq: Vec<f32> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| (x - y) * (x - y)).collect();
        let n = sq.len().max(1) as f32;
        let loss = pairwise_sum(&sq) / n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b), ng))
    }

    /// Row-wise cosine similarity of two `[n, d]` matrices, giving `[n]`.
    /// Norms are clamped below at 1e-8.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("cosine_similarity", a, b)?;
        let (xa, xb) = (self.value(a), self.value(b));
        let (r, c) = (xa.rows(), xa.cols());
        let mut out = Vec::with_capacity(r);
        let mut na = Vec::with_capacity(r);
        let mut nb = Vec::with_capacity(r);
        for i in 0..r {
            let (ra, rb) = (&xa.data()[i * c..(i + 1) * c], &xb.data()[i * c..(i + 1) * c]);
            let (u, v) = (dot(ra, ra).sqrt().max(1e-8), dot(rb, rb).sqrt().max(1e-8));
            out.push(dot(ra, rb) / (u * v));
            na.push(u);
            nb.push(v);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape: vec![r], data: out }, Op::Cosine { a, b, na, nb }, ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f32::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Inverted dropout with drop probability `rate`. Identity on an eval
    /// tape or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f32, rng: &mut RngStream) -> Var {
        if !self.train || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let x = self.value(a);
        let mask: Vec<f32> = (0..x.numel()).map(|_| if rng.uniform_f32() < keep { 1.0 / keep } else { 0.0 }).collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor { shape: x.shape().to_vec(), data };
        let ng = self.ng(a);
        self.push(t, Op::Dropout { x: a, mask }, ng)
    }

    /// Concatenation of 2-D tensors along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat"))?;
        let r = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let x = self.value(p);
            if x.rows() != r || x.shape().len() > 2 {
                return Err(shape_err("concat", self.shape(first), x.shape()));
            }
            widths.push(x.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor { shape: vec![r, total], data }, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        if start + len > c {
            return Err(shape_err("slice_cols", x.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor { shape: vec![r, len], data }, Op::SliceCols { x: a, start }, ng))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err("layer_norm", x.shape(), self.value(gamma).shape()));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = x.data().to_vec();
        let mut rstd = Vec::with_capacity(x.rows());
        let mut out = vec![0.0; x.numel()];
        for (row, orow) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
            let mean = pairwise_sum(row) / c as f32;
            row.iter_mut().for_each(|v| *v -= mean);
            let var = dot(row, row) / c as f32;
            let rs = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= rs);
            for j in 0..c {
                orow[j] = row[j] * g[j] + b[j];
            }
            rstd.push(rs);
        }
        let t = Tensor { shape: x.shape().to_vec(), data: out };
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(t, Op::LayerNorm { x: a, gamma, beta, xhat, rstd }, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = pairwise_sum(self.value(a).data());
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = pairwise_sum(x.data()) / x.numel().max(1) as f32;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    /// For `x` holding `B·T` rows of width `D` and constant `weights`
    /// `[B, T]`, returns `[B, D]` with `out[b] = Σ_t weights[b,t] · x[b·T + t]`.
    pub fn weighted_rows(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if weights.shape().len() != 2 || weights.numel() != rows {
            return Err(shape_err("weighted_rows", xv.shape(), weights.shape()));
        }
        let (b, t) = (weights.shape()[0], weights.shape()[1]);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let w = weights.data()[bi * t + ti];
                if w != 0.0 {
                    let r = &xv.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                    for j in 0..d {
                        o[j] += w * r[j];
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape: vec![b, d], data: out }, Op::WeightedRows { x, weights }, ng))
    }

    /// Linear layer: `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Gradients of scalar `loss` with respect to every parameter and
    /// differentiable input that influences it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(shape_err("backward (non-scalar loss)", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                match node.value {
                    Value::Param(id) => match out.params.get_mut(&id) {
                        Some(acc) => add_into(acc, &g),
                        None => {
                            out.params.insert(id, g);
                        }
                    },
                    Value::Owned(_) => {
                        out.leaves.insert(idx, g);
                    }
                }
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(out)
    }

    fn backward_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let y = self.value_at(idx);
        // Accumulate a contribution for input `v`, built lazily.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.value(v).numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * xb[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * xa[i];
                    }
                });
            }
            Op::AddBias(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                let c = self.value(*b).numel();
                acc(*b, &mut |d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += s * g[i];
                }
            }),
            Op::MatMul(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
                let gv = View::new(g, m, n);
                acc(*a, &mut |d| gemm(gv, View::new(xb.data(), k, n).t(), d, 1.0));
                acc(*b, &mut |d| gemm(View::new(xa.data(), m, k).t(), gv, d, 1.0));
            }
            Op::Bmm { a, b, trans_b } => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let (bt, m, k) = (xa.shape()[0], xa.shape()[1], xa.shape()[2]);
                let n = y.shape()[2];
                acc(*a, &mut |d| {
                    for i in 0..bt {
                        let gv = View::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let bd = &xb.data()[i * k * n..(i + 1) * k * n];
                        // dA = G·Bᵀ, or G·B when B was used transposed.
                        let bv = if *trans_b { View::new(bd, n, k) } else { View::new(bd, k, n).t() };
                        gemm(gv, bv, &mut d[i * m * k..(i + 1) * m * k], 1.0);
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..bt {
                        let gv = View::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let av = View::new(&xa.data()[i * m * k..(i + 1) * m * k], m, k);
                        let dst = &mut d[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(gv.t(), av, dst, 1.0);
                        } else {
                            gemm(av.t(), gv, dst, 1.0);
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, y.shape(), &inv);
                acc(*a, &mut |d| add_into(d, &back));
            }
            Op::Embedding { table, ids } => {
                let dcols = self.value(*table).cols();
                acc(*table, &mut |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut d[i * dcols..(i + 1) * dcols], &g[r * dcols..(r + 1) * dcols]);
                    }
                });
            }
            Op::Softmax(a) => {
                let c = y.cols();
                acc(*a, &mut |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(g.chunks(c)) {
                        let s = dot(yrow, grow);
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = y.cols();
                acc(*a, &mut |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(g.chunks(c)) {
                        let s = pairwise_sum(grow);
                        for j in 0..c {
                            drow[j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let c = self.value(*logits).cols();
                let scale = g[0] / *count as f32;
                acc(*logits, &mut |d| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let prow = &probs[i * c..(i + 1) * c];
                        let drow = &mut d[i * c..(i + 1) * c];
                        for j in 0..c {
                            drow[j] += scale * prow[j];
                        }
                        drow[*t] -= scale;
                    }
                });
            }
            Op::Mse(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * g[0] / xa.len().max(1) as f32;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += s * (xa[i] - xb[i]);
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= s * (xa[i] - xb[i]);
                    }
                });
            }
            Op::Cosine { a, b, na, nb } => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let c = xa.cols();
                let cos = y.data();
                let grad_side = |d: &mut [f32], own: &[f32], other: &[f32], n_own: &[f32], n_other: &[f32]| {
                    for i in 0..cos.len() {
                        let (u, v) = (&own[i * c..(i + 1) * c], &other[i * c..(i + 1) * c]);
                        let inv = 1.0 / (n_own[i] * n_other[i]);
                        let self_term = cos[i] / (n_own[i] * n_own[i]);
                        for j in 0..c {
                            d[i * c + j] += g[i] * (v[j] * inv - self_term * u[j]);
                        }
                    }
                };
                acc(*a, &mut |d| grad_side(d, xa.data(), xb.data(), na, nb));
                acc(*b, &mut |d| grad_side(d, xb.data(), xa.data(), nb, na));
            }
            Op::Tanh(a) => acc(*a, &mut |d| {
                for (i, &yv) in y.data().iter().enumerate() {
                    d[i] += g[i] * (1.0 - yv * yv);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for (i, &yv) in y.data().iter().enumerate() {
                    d[i] += g[i] * yv * (1.0 - yv);
                }
            }),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * mask[i];
                }
            }),
            Op::Concat(parts) => {
                let total = y.cols();
                let r = y.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |d| {
                        for i in 0..r {
                            add_into(&mut d[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = y.cols();
                acc(*x, &mut |d| {
                    for i in 0..y.rows() {
                        add_into(&mut d[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = y.cols();
                let gam = self.value(*gamma).data();
                acc(*gamma, &mut |d| {
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * xrow[j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for grow in g.chunks(c) {
                        add_into(d, grow);
                    }
                });
                acc(*x, &mut |d| {
                    let mut gx = vec![0.0; c];
                    for (r, (grow, xrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            gx[j] = grow[j] * gam[j];
                        }
                        let s1 = pairwise_sum(&gx);
                        let s2 = dot(&gx, xrow);
                        let k = rstd[r] / c as f32;
                        let drow = &mut d[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += k * (c as f32 * gx[j] - s1 - xrow[j] * s2);
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanAll(a) => acc(*a, &mut |d| {
                let s = g[0] / d.len().max(1) as f32;
                d.iter_mut().for_each(|v| *v += s);
            }),
            Op::WeightedRows { x, weights } => {
                let dcols = y.cols();
                let (b, t) = (weights.shape()[0], weights.shape()[1]);
                acc(*x, &mut |d| {
                    for bi in 0..b {
                        let grow = &g[bi * dcols..(bi + 1) * dcols];
                        for ti in 0..t {
                            let w = weights.data()[bi * t + ti];
                            if w != 0.0 {
                                let drow = &mut d[(bi * t + ti) * dcols..(bi * t + ti + 1) * dcols];
                                for j in 0..dcols {
                                    drow[j] += w * grow[j];
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    fn value_at(&self, idx: usize) -> &Tensor {
        self.value(Var(idx))
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f32 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if m == f32::NEG_INFINITY {
        return m;
    }
    let s: f32 = row.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
