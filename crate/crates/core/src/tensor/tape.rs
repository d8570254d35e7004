//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Nodes are appended in execution order, so the record is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use std::sync::Arc;

use super::ops::{self, gelu, gelu_grad, sigmoid, silu, silu_grad};
use super::{numel, Mask, Scalar, Tensor};
use crate::attention::{self, KeySets};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Silu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedSoftmax(Var),
    AvgPool(Var, usize),
    Upsample(Var, usize),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Var, Var),
    FrameScale(Var, Var),
    Reshape(Var),
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        keys: Arc<KeySets>,
        heads: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gelu(_) => "gelu",
            Op::Silu(_) => "silu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::AvgPool(..) => "avg_pool2d",
            Op::Upsample(..) => "upsample_nearest2d",
            Op::SliceLast { .. } => "slice_last",
            Op::ConcatLast(..) => "concat_last",
            Op::FrameScale(..) => "frame_scale",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients for every leaf that was registered with `requires_grad`.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    /// Finite-value checking follows `debug_assertions`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("shapes checked by caller")
    }

    /// `a[..., k] · b[k, n]`, treating all leading axes of `a` as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (Some((&k, lead)), &[k2, n]) = (sa.split_last(), sb) else {
            return Err(Error::shape(format!("matmul: operands {sa:?} x {sb:?}")));
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {sa:?} x {sb:?}"
            )));
        }
        let m = numel(lead);
        let mut shape = lead.to_vec();
        shape.push(n);
        let out = ops::mm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose2d(self.value(a))?;
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[n]` bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let bv = self.value(bias).data();
        let data = if n == 0 {
            Vec::new()
        } else {
            xv.data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b))
                .collect()
        };
        let out = Tensor::new(xv.shape(), data)?;
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::from_usize(v.numel().max(1)));
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(silu);
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let out = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let c = *self.shape(x).last().expect("checked by layer_norm");
        let (mean, rstd) = ops::row_stats(self.value(x).data(), c);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let out = ops::masked_softmax_lastdim(self.value(x), mask)?;
        self.push(out, Op::MaskedSoftmax(x), &[x])
    }

    pub fn avg_pool2d(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = ops::avg_pool2d(self.value(x), r)?;
        self.push(out, Op::AvgPool(x, r), &[x])
    }

    pub fn upsample_nearest2d(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = ops::upsample_nearest2d(self.value(x), r)?;
        self.push(out, Op::Upsample(x, r), &[x])
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        let c = *shape.last().ok_or_else(|| Error::shape("slice_last on rank 0"))?;
        if start + len > c {
            return Err(Error::shape(format!(
                "slice {start}..{} of last axis with {c} channels",
                start + len
            )));
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = len;
        let data = if c == 0 {
            Vec::new()
        } else {
            self.value(x)
                .data()
                .chunks(c)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect()
        };
        let out = Tensor::new(out_shape, data)?;
        self.push(out, Op::SliceLast { x, start }, &[x])
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (Some((&ca, la)), Some((&cb, lb))) = (sa.split_last(), sb.split_last()) else {
            return Err(Error::shape("concat_last on rank 0"));
        };
        if la != lb {
            return Err(Error::shape(format!("concat_last: {sa:?} with {sb:?}")));
        }
        let rows = numel(la);
        let mut shape = la.to_vec();
        shape.push(ca + cb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::ConcatLast(a, b), &[a, b])
    }

    /// Multiplies every element of `x[B, T, ...]` by `scale[B, T]`.
    pub fn frame_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(scale));
        if sx.len() < 2 || ss != &sx[..2] {
            return Err(Error::shape(format!("frame_scale: {sx:?} by {ss:?}")));
        }
        let inner = numel(&sx[2..]);
        let s = self.value(scale).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * s[i / inner.max(1)])
            .collect();
        let out = Tensor::new(sx, data)?;
        self.push(out, Op::FrameScale(x, scale), &[x, scale])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(format!(
                "gather index {bad} out of bounds for {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Gather { x, index }, &[x])
    }

    /// Multi-head scaled dot-product attention over `[..., S, c]` inputs where
    /// query `s` attends exactly to `keys.keys(s)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, keys: Arc<KeySets>, heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (out, probs) = attention::sparse_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            &keys,
            heads,
        )?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                keys,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.needs_grad) {
                (Op::Leaf, true) => Some(
                    Tensor::new(
                        node.value.shape(),
                        g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]),
                    )
                    .expect("gradient matches leaf shape"),
                ),
                _ => None,
            })
            .collect();
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, contrib: Vec<T>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).numel() / k.max(1);
                if wants(*a) {
                    self.accumulate(grads, *a, ops::mm_a_bt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, ops::mm_at_b(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let gt = Tensor::new(s, g.to_vec())?;
                self.accumulate(grads, *a, ops::transpose2d(&gt)?.into_data());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, d);
                }
                if wants(*b) {
                    let d = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.to_vec());
                if wants(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![T::zero(); n];
                    if n > 0 {
                        for row in g.chunks(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / T::from_usize(n.max(1));
                self.accumulate(grads, *x, vec![v; n]);
            }
            Op::Gelu(x) => {
                let d = g.iter().zip(val(*x)).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Silu(x) => {
                let d = g.iter().zip(val(*x)).map(|(&gv, &xv)| gv * silu_grad(xv)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => self.layer_norm_backward(*x, *gamma, *beta, mean, rstd, g, grads),
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                if n > 0 {
                    for ((ys, gs), ds) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in ds.iter_mut().zip(ys).zip(gs) {
                            *d = yv * (gv - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool(x, r) => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                let inv = T::one() / T::from_usize(r * r);
                let up = ops::upsample_nearest2d(&gt, *r)?;
                self.accumulate(grads, *x, up.into_data().into_iter().map(|v| v * inv).collect());
            }
            Op::Upsample(x, r) => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                let rr = T::from_usize(r * r);
                let pooled = ops::avg_pool2d(&gt, *r)?;
                self.accumulate(grads, *x, pooled.into_data().into_iter().map(|v| v * rr).collect());
            }
            Op::SliceLast { x, start } => {
                let c = *self.shape(*x).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                if len > 0 {
                    for (row, gs) in dx.chunks_mut(c).zip(g.chunks(len)) {
                        row[*start..*start + len].copy_from_slice(gs);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatLast(a, b) => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let rows = self.value(*a).numel() / ca.max(1);
                let rows = if ca == 0 { self.value(*b).numel() / cb.max(1) } else { rows };
                let (mut da, mut db) = (Vec::with_capacity(rows * ca), Vec::with_capacity(rows * cb));
                for r in 0..rows {
                    let row = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::FrameScale(x, s) => {
                let frames = self.value(*s).numel();
                let inner = (self.value(*x).numel() / frames.max(1)).max(1);
                if wants(*x) {
                    let sv = val(*s);
                    let d = g.iter().enumerate().map(|(i, &gv)| gv * sv[i / inner]).collect();
                    self.accumulate(grads, *x, d);
                }
                if wants(*s) {
                    let xv = val(*x);
                    let mut ds = vec![T::zero(); frames];
                    for (i, (&gv, &xe)) in g.iter().zip(xv).enumerate() {
                        ds[i / inner] += gv * xe;
                    }
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Gather { x, index } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&i, &gv) in index.iter().zip(g) {
                    dx[i] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                keys,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = attention::sparse_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    keys,
                    *heads,
                    probs,
                    g,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        rstd: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xv = self.value(x).data();
        let gam = self.value(gamma).data();
        let c = gam.len();
        let inv_c = T::one() / T::from_usize(c);
        let mut dx = vec![T::zero(); xv.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); c];
        let mut dxhat = vec![T::zero(); c];
        for (r, (xs, gs)) in xv.chunks(c).zip(g.chunks(c)).enumerate() {
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for j in 0..c {
                xhat[j] = (xs[j] - mean[r]) * rstd[r];
                dxhat[j] = gs[j] * gam[j];
                dgamma[j] += gs[j] * xhat[j];
                dbeta[j] += gs[j];
                sum_d += dxhat[j];
                sum_dx += dxhat[j] * xhat[j];
            }
            let (md, mdx) = (sum_d * inv_c, sum_dx * inv_c);
            for j in 0..c {
                dx[r * c + j] = rstd[r] * (dxhat[j] - md - xhat[j] * mdx);
            }
        }
        self.accumulate(grads, x, dx);
        self.accumulate(grads, gamma, dgamma);
        self.accumulate(grads, beta, dbeta);
    }
}
