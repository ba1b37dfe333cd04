//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes are created in topological order, so
//! `backward` is a single reverse sweep over the node list.

use crate::error::{Error, Result};
use crate::tensor::{
    axis_split, broadcast_shapes, broadcast_strides, for_each_broadcast, gemm, numel, Scalar,
    Tensor,
};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics observed by a train-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Binary {
        a: Var,
        b: Var,
        op: BinaryOp,
    },
    Relu(Var),
    Scale(Var, T),
    Softmax {
        x: Var,
        axis: usize,
    },
    L1Normalize {
        x: Var,
        axis: usize,
    },
    MaxReduce {
        x: Var,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
        axis: usize,
    },
    Reshape(Var),
    TransposeLast2(Var),
    BroadcastTo(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Relu(x)
            | Op::Scale(x, _)
            | Op::Softmax { x, .. }
            | Op::L1Normalize { x, .. }
            | Op::MaxReduce { x, .. }
            | Op::SumAll(x)
            | Op::SumAxis { x, .. }
            | Op::Gather { x, .. }
            | Op::Reshape(x)
            | Op::TransposeLast2(x)
            | Op::BroadcastTo(x) => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn acc<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push_with(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_with(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_with(t, Op::Leaf, true)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shapes(ba, bb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let mut shape = batch.clone();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); numel(&shape)];
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let strides_a = broadcast_strides(ba, &batch);
        let strides_b = broadcast_strides(bb, &batch);
        for_each_broadcast(&batch, &strides_a, &strides_b, |o, ia, ib| {
            gemm(
                m,
                k,
                n,
                &xa[ia * m * k..(ia + 1) * m * k],
                false,
                &xb[ib * k * n..(ib + 1) * k * n],
                false,
                &mut out[o * m * n..(o + 1) * m * n],
                false,
            );
        });
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }))
    }

    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape =
            broadcast_shapes(&sa, &sb).ok_or_else(|| Error::shape("elementwise", &sa, &sb))?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        if op == BinaryOp::Div {
            if let Some(pos) = xb.iter().position(|v| *v == T::zero()) {
                return Err(Error::Domain {
                    op: "div",
                    msg: format!("zero divisor at flat index {pos}"),
                });
            }
        }
        let mut out = vec![T::zero(); numel(&shape)];
        let strides_a = broadcast_strides(&sa, &shape);
        let strides_b = broadcast_strides(&sb, &shape);
        match op {
            BinaryOp::Add => {
                for_each_broadcast(&shape, &strides_a, &strides_b, |o, i, j| {
                    out[o] = xa[i] + xb[j]
                })
            }
            BinaryOp::Sub => {
                for_each_broadcast(&shape, &strides_a, &strides_b, |o, i, j| {
                    out[o] = xa[i] - xb[j]
                })
            }
            BinaryOp::Mul => {
                for_each_broadcast(&shape, &strides_a, &strides_b, |o, i, j| {
                    out[o] = xa[i] * xb[j]
                })
            }
            BinaryOp::Div => {
                for_each_broadcast(&shape, &strides_a, &strides_b, |o, i, j| {
                    out[o] = xa[i] / xb[j]
                })
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary { a, b, op }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Div)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        let (outer, n, inner) = axis_split(xt.shape(), axis)?;
        let src = xt.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    max = max.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let shape = xt.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }))
    }

    /// Divides each slice along `axis` by its sum of absolute values;
    /// all-zero slices pass through unchanged.
    pub fn l1_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        let (outer, n, inner) = axis_split(xt.shape(), axis)?;
        let src = xt.data();
        let mut out = src.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let s: T = (0..n).map(|j| src[at(j)].abs()).sum();
                if s > T::zero() {
                    for j in 0..n {
                        out[at(j)] = src[at(j)] / s;
                    }
                }
            }
        }
        let shape = xt.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::L1Normalize { x, axis }))
    }

    /// Maximum along `axis` (removed from the shape) and the winning
    /// positions along that axis. Ties go to the lowest position.
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let xt = self.value(x);
        let (outer, n, inner) = axis_split(xt.shape(), axis)?;
        if n == 0 {
            return Err(Error::shape("max_reduce", xt.shape(), &[]));
        }
        let src = xt.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        let mut positions = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = src[base + i];
                for j in 1..n {
                    let v = src[base + j * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                }
                out.push(best_v);
                argmax.push(base + best * inner + i);
                positions.push(best);
            }
        }
        let mut shape = xt.shape().to_vec();
        shape.remove(axis);
        let v = self.push(Tensor::new(shape, out)?, Op::MaxReduce { x, argmax });
        Ok((v, positions))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        let (outer, n, inner) = axis_split(xt.shape(), axis)?;
        let src = xt.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&tensors, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Selects entries along `axis`; repeated indices are allowed.
    pub fn gather(&mut self, x: Var, indices: &[usize], axis: usize) -> Result<Var> {
        let xt = self.value(x);
        let (outer, n, inner) = axis_split(xt.shape(), axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                extent: n,
            });
        }
        let src = xt.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &t in indices {
                let start = (o * n + t) * inner;
                out.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut shape = xt.shape().to_vec();
        shape[axis] = indices.len();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Gather {
                x,
                indices: indices.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape();
        if shape.len() < 2 {
            return Err(Error::InvalidAxis {
                axis: 1,
                rank: shape.len(),
            });
        }
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let out = transpose_blocks(xt.data(), m, n);
        let mut new_shape = shape.to_vec();
        let r = new_shape.len();
        new_shape.swap(r - 2, r - 1);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::TransposeLast2(x)))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if broadcast_shapes(&xs, shape).as_deref() != Some(shape) {
            return Err(Error::shape("broadcast_to", &xs, shape));
        }
        let src = self.value(x).data();
        let sx = broadcast_strides(&xs, shape);
        let zero = vec![0; shape.len()];
        let mut out = vec![T::zero(); numel(shape)];
        for_each_broadcast(shape, &sx, &zero, |o, i, _| out[o] = src[i]);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::BroadcastTo(x)))
    }

    /// `x·W + b` over the last axis. `w` has shape `(d_in, d_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear bias", &sw, self.shape(b)));
            }
        }
        let rows = numel(&sx) / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            b.is_some(),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }))
    }

    /// Per-channel batch normalization over every axis but the last.
    ///
    /// Train mode normalizes with the biased batch variance and returns the
    /// observed statistics; eval mode uses the supplied running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| Error::shape("batchnorm", &sx, &[]))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batchnorm", &sx, self.shape(gamma)));
        }
        let rows = numel(&sx) / c;
        let eps = T::from_f64(BN_EPS);
        let src = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if rows < 2 {
                    return Err(Error::Config(
                        "batchnorm in train mode needs at least 2 rows per channel".into(),
                    ));
                }
                let n = T::from_usize(rows);
                let mut mean = vec![T::zero(); c];
                for row in src.chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![T::zero(); c];
                for row in src.chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s /= n);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: rows,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape("batchnorm running stats", &sx, &[running_mean.len()]));
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let v = self.push(
            Tensor::new(sx, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
        );
        Ok((v, stats))
    }

    /// Mean softmax cross-entropy of `(B, C)` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                extent: c,
            });
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(src.len());
        let mut loss = T::zero();
        for (row, &label) in src.chunks(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        loss /= T::from_usize(labels.len());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if !self.value(output).is_empty() && self.value(output).len() != 1 {
            return Err(Error::shape("backward (non-scalar output)", self.shape(output), &[]));
        }
        let seed = Tensor::ones(self.shape(output).to_vec());
        self.backward_with_seed(output, seed, &[])
    }

    /// Reverse sweep seeded with an explicit upstream gradient. Gradients are
    /// kept for leaves and for every var listed in `retain`.
    pub fn backward_with_seed(
        &self,
        output: Var,
        seed: Tensor<T>,
        retain: &[Var],
    ) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward seed", seed.shape(), self.shape(output)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.into_data());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || grads[i].is_none() {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let g = hi[0].as_deref().unwrap();
            self.backward_node(node, g, lo);
            if !matches!(node.op, Op::Leaf) && !retain.contains(&Var(i)) {
                hi[0] = None;
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|data| Tensor::new(n.value.shape().to_vec(), data).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
                let batch = &node.value.shape()[..node.value.rank() - 2];
                let strides_a = broadcast_strides(ba, batch);
                let strides_b = broadcast_strides(bb, batch);
                let (xa, xb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = acc(&mut grads[a.0], xa.len());
                    for_each_broadcast(batch, &strides_a, &strides_b, |o, ia, ib| {
                        gemm(
                            m,
                            n,
                            k,
                            &g[o * m * n..(o + 1) * m * n],
                            false,
                            &xb[ib * k * n..(ib + 1) * k * n],
                            true,
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            true,
                        );
                    });
                }
                if wants(*b) {
                    let gb = acc(&mut grads[b.0], xb.len());
                    for_each_broadcast(batch, &strides_a, &strides_b, |o, ia, ib| {
                        gemm(
                            k,
                            m,
                            n,
                            &xa[ia * m * k..(ia + 1) * m * k],
                            true,
                            &g[o * m * n..(o + 1) * m * n],
                            false,
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            true,
                        );
                    });
                }
            }
            Op::Binary { a, b, op } => {
                let shape = node.value.shape();
                let (ta, tb) = (val(*a), val(*b));
                let strides_a = broadcast_strides(ta.shape(), shape);
                let strides_b = broadcast_strides(tb.shape(), shape);
                let (xa, xb) = (ta.data(), tb.data());
                if wants(*a) {
                    let ga = acc(&mut grads[a.0], xa.len());
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => {
                            for_each_broadcast(shape, &strides_a, &strides_b, |o, i, _| {
                                ga[i] += g[o]
                            })
                        }
                        BinaryOp::Mul => {
                            for_each_broadcast(shape, &strides_a, &strides_b, |o, i, j| {
                                ga[i] += g[o] * xb[j]
                            })
                        }
                        BinaryOp::Div => {
                            for_each_broadcast(shape, &strides_a, &strides_b, |o, i, j| {
                                ga[i] += g[o] / xb[j]
                            })
                        }
                    }
                }
                if wants(*b) {
                    let gb = acc(&mut grads[b.0], xb.len());
                    match op {
                        BinaryOp::Add => {
                            for_each_broadcast(shape, &strides_a, &strides_b, |o, _, j| {
                                gb[j] += g[o]
                            })
                        }
                        BinaryOp::Sub => {
                            for_each_broadcast(shape, &strides_a, &strides_b, |o, _, j| {
                                gb[j] -= g[o]
                            })
                        }
                        BinaryOp::Mul => {
                            for_each_broadcast(shape, &strides_a, &strides_b, |o, i, j| {
                                gb[j] += g[o] * xa[i]
                            })
                        }
                        BinaryOp::Div => {
                            for_each_broadcast(shape, &strides_a, &strides_b, |o, i, j| {
                                gb[j] -= g[o] * xa[i] / (xb[j] * xb[j])
                            })
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let src = val(*x).data();
                let gx = acc(&mut grads[x.0], src.len());
                for ((d, &s), &gi) in gx.iter_mut().zip(src).zip(g) {
                    if s > T::zero() {
                        *d += gi;
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = acc(&mut grads[x.0], g.len());
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += gi * *c;
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis).expect("axis");
                let gx = acc(&mut grads[x.0], y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::L1Normalize { x, axis } => {
                let src = val(*x).data();
                let (outer, n, inner) = axis_split(val(*x).shape(), *axis).expect("axis");
                let gx = acc(&mut grads[x.0], src.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let s: T = (0..n).map(|j| src[at(j)].abs()).sum();
                        if s > T::zero() {
                            let dot: T = (0..n).map(|j| g[at(j)] * src[at(j)]).sum();
                            for j in 0..n {
                                let sign = src[at(j)].signum();
                                gx[at(j)] += g[at(j)] / s - sign * dot / (s * s);
                            }
                        } else {
                            for j in 0..n {
                                gx[at(j)] += g[at(j)];
                            }
                        }
                    }
                }
            }
            Op::MaxReduce { x, argmax } => {
                let gx = acc(&mut grads[x.0], val(*x).len());
                for (&src_idx, &gi) in argmax.iter().zip(g) {
                    gx[src_idx] += gi;
                }
            }
            Op::SumAll(x) => {
                let gx = acc(&mut grads[x.0], val(*x).len());
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = axis_split(val(*x).shape(), *axis).expect("axis");
                let gx = acc(&mut grads[x.0], outer * n * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ext = val(p).shape()[*axis];
                    if wants(p) {
                        let gp = acc(&mut grads[p.0], outer * ext * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            let dst = &mut gp[o * ext * inner..(o + 1) * ext * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Gather { x, indices, axis } => {
                let (outer, n, inner) = axis_split(val(*x).shape(), *axis).expect("axis");
                let gx = acc(&mut grads[x.0], outer * n * inner);
                let m = indices.len();
                for o in 0..outer {
                    for (t, &idx) in indices.iter().enumerate() {
                        let src = &g[(o * m + t) * inner..(o * m + t + 1) * inner];
                        let dst = &mut gx[(o * n + idx) * inner..(o * n + idx + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = acc(&mut grads[x.0], g.len());
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::TransposeLast2(x) => {
                let shape = node.value.shape();
                let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let back = transpose_blocks(g, m, n);
                let gx = acc(&mut grads[x.0], g.len());
                for (d, s) in gx.iter_mut().zip(back) {
                    *d += s;
                }
            }
            Op::BroadcastTo(x) => {
                let shape = node.value.shape();
                let sx = broadcast_strides(val(*x).shape(), shape);
                let zero = vec![0; shape.len()];
                let gx = acc(&mut grads[x.0], val(*x).len());
                for_each_broadcast(shape, &sx, &zero, |o, i, _| gx[i] += g[o]);
            }
            Op::Linear { x, w, b } => {
                let sw = val(*w).shape();
                let (din, dout) = (sw[0], sw[1]);
                let rows = g.len() / dout;
                if wants(*x) {
                    let gx = acc(&mut grads[x.0], rows * din);
                    gemm(rows, dout, din, g, false, val(*w).data(), true, gx, true);
                }
                if wants(*w) {
                    let gw = acc(&mut grads[w.0], din * dout);
                    gemm(din, rows, dout, val(*x).data(), true, g, false, gw, true);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let gb = acc(&mut grads[b.0], dout);
                        for row in g.chunks(dout) {
                            for (d, &s) in gb.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let rows = g.len() / c;
                let gam = val(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_g[ch] += grow[ch];
                        sum_gx[ch] += grow[ch] * hrow[ch];
                    }
                }
                if wants(*x) {
                    let gx = acc(&mut grads[x.0], g.len());
                    if *train {
                        let n = T::from_usize(rows);
                        for ((drow, grow), hrow) in
                            gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c))
                        {
                            for ch in 0..c {
                                let k = gam[ch] * inv_std[ch] / n;
                                drow[ch] += k * (n * grow[ch] - sum_g[ch] - hrow[ch] * sum_gx[ch]);
                            }
                        }
                    } else {
                        for (drow, grow) in gx.chunks_mut(c).zip(g.chunks(c)) {
                            for ch in 0..c {
                                drow[ch] += grow[ch] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                if wants(*gamma) {
                    let gg = acc(&mut grads[gamma.0], c);
                    for ch in 0..c {
                        gg[ch] += sum_gx[ch];
                    }
                }
                if wants(*beta) {
                    let gb = acc(&mut grads[beta.0], c);
                    for ch in 0..c {
                        gb[ch] += sum_g[ch];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = probs.len() / labels.len();
                let scale = g[0] / T::from_usize(labels.len());
                let gl = acc(&mut grads[logits.0], probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
    }
}

fn transpose_blocks<T: Scalar>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let block = m * n;
    let mut out = vec![T::zero(); src.len()];
    if block == 0 {
        return out;
    }
    for (s, d) in src.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}
