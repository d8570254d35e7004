//! Masked multi-head attention, evaluated either densely against a boolean
//! mask or sparsely over per-query key lists.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::AttentionGeometry;
use crate::tensor::{self, Mask, Scalar, Tape, Tensor, Var};

/// Compressed per-query key lists (CSR). Keys within a query are ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySets {
    offsets: Vec<usize>,
    keys: Vec<u32>,
}

impl KeySets {
    fn from_lists(lists: impl IntoIterator<Item = Vec<usize>>) -> Result<Self> {
        let mut offsets = vec![0];
        let mut keys = Vec::new();
        for (row, list) in lists.into_iter().enumerate() {
            if list.is_empty() {
                return Err(Error::FullyMasked { row });
            }
            keys.extend(list.into_iter().map(|k| k as u32));
            offsets.push(keys.len());
        }
        Ok(Self { offsets, keys })
    }

    pub fn from_geometry(geom: &AttentionGeometry) -> Result<Self> {
        if geom.tokens() > u32::MAX as usize {
            return Err(Error::config("token grid too large for key indices"));
        }
        let grid = geom.grid;
        let lists = (0..grid.tokens())
            .map(|q| geom.keys_for(grid.coord(q)?))
            .collect::<Result<Vec<_>>>()?;
        Self::from_lists(lists)
    }

    pub fn from_mask(mask: &Mask) -> Result<Self> {
        let &[s, s2] = mask.shape() else {
            return Err(Error::shape(format!("mask must be square, got {:?}", mask.shape())));
        };
        if s != s2 {
            return Err(Error::shape(format!("mask must be square, got {:?}", mask.shape())));
        }
        Self::from_lists((0..s).map(|q| (0..s).filter(|&k| mask.at(q, k)).collect()))
    }

    pub fn queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self, q: usize) -> &[u32] {
        &self.keys[self.offsets[q]..self.offsets[q + 1]]
    }

    fn range(&self, q: usize) -> std::ops::Range<usize> {
        self.offsets[q]..self.offsets[q + 1]
    }

    /// For each key, the `(query, position)` pairs that reference it, in
    /// ascending query order.
    fn transposed(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); self.queries()];
        for q in 0..self.queries() {
            for pos in self.range(q) {
                out[self.keys[pos] as usize].push((q, pos));
            }
        }
        out
    }
}

struct Layout {
    lead: usize,
    seq: usize,
    width: usize,
    head_dim: usize,
}

fn layout<T: Scalar>(q: &Tensor<T>, keys: &KeySets, heads: usize) -> Result<Layout> {
    let shape = q.shape();
    if shape.len() < 2 {
        return Err(Error::shape(format!("attention input needs rank >= 2, got {shape:?}")));
    }
    let (seq, width) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if seq != keys.queries() {
        return Err(Error::shape(format!(
            "sequence length {seq} does not match key sets for {} queries",
            keys.queries()
        )));
    }
    if heads == 0 || width % heads != 0 {
        return Err(Error::shape(format!("{width} channels cannot split into {heads} heads")));
    }
    Ok(Layout {
        lead: q.numel() / (seq * width).max(1),
        seq,
        width,
        head_dim: width / heads,
    })
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Returns the output and the attention probabilities, laid out as
/// `[lead][csr position][head]`.
pub(crate) fn sparse_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    keys: &KeySets,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let Layout {
        lead,
        seq,
        width,
        head_dim,
    } = layout(q, keys, heads)?;
    let scale = T::one() / T::from_usize(head_dim).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    let rows: Vec<(Vec<T>, Vec<T>)> = (0..lead * seq)
        .into_par_iter()
        .map(|row| {
            let (b, s) = (row / seq, row % seq);
            let ks = keys.keys(s);
            let base = b * seq * width;
            let mut out = vec![T::zero(); width];
            let mut probs = vec![T::zero(); ks.len() * heads];
            let mut logits = vec![T::zero(); ks.len()];
            for h in 0..heads {
                let off = h * head_dim;
                let qrow = &qd[row * width + off..row * width + off + head_dim];
                let mut max = T::neg_infinity();
                for (l, &key) in logits.iter_mut().zip(ks) {
                    let kr = base + key as usize * width + off;
                    *l = dot(qrow, &kd[kr..kr + head_dim]) * scale;
                    max = max.max(*l);
                }
                let mut denom = T::zero();
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    denom += *l;
                }
                let o = &mut out[off..off + head_dim];
                for (j, (&e, &key)) in logits.iter().zip(ks).enumerate() {
                    let p = e / denom;
                    probs[j * heads + h] = p;
                    let vr = base + key as usize * width + off;
                    for (ov, &vv) in o.iter_mut().zip(&vd[vr..vr + head_dim]) {
                        *ov += p * vv;
                    }
                }
            }
            (out, probs)
        })
        .collect();

    let mut out = Vec::with_capacity(q.numel());
    let mut probs = Vec::with_capacity(lead * keys.nnz() * heads);
    for (o, p) in rows {
        out.extend(o);
        probs.extend(p);
    }
    Ok((Tensor::new(q.shape(), out)?, probs))
}

pub(crate) fn sparse_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    keys: &KeySets,
    heads: usize,
    probs: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let Layout {
        lead,
        seq,
        width,
        head_dim,
    } = layout(q, keys, heads).expect("validated in forward");
    let scale = T::one() / T::from_usize(head_dim).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let nnz = keys.nnz();

    // Pass 1, per query: logit gradients (pre-scaled) and dq.
    let per_query: Vec<(Vec<T>, Vec<T>)> = (0..lead * seq)
        .into_par_iter()
        .map(|row| {
            let (b, s) = (row / seq, row % seq);
            let ks = keys.keys(s);
            let base = b * seq * width;
            let p = &probs[(b * nnz + keys.offsets[s]) * heads..][..ks.len() * heads];
            let mut dlogit = vec![T::zero(); ks.len() * heads];
            let mut dq = vec![T::zero(); width];
            for h in 0..heads {
                let off = h * head_dim;
                let g = &grad_out[row * width + off..row * width + off + head_dim];
                let mut weighted = T::zero();
                for (j, &key) in ks.iter().enumerate() {
                    let vr = base + key as usize * width + off;
                    let dp = dot(g, &vd[vr..vr + head_dim]);
                    dlogit[j * heads + h] = dp;
                    weighted += p[j * heads + h] * dp;
                }
                let dqh = &mut dq[off..off + head_dim];
                for (j, &key) in ks.iter().enumerate() {
                    let idx = j * heads + h;
                    let dl = p[idx] * (dlogit[idx] - weighted) * scale;
                    dlogit[idx] = dl;
                    let kr = base + key as usize * width + off;
                    for (d, &kv) in dqh.iter_mut().zip(&kd[kr..kr + head_dim]) {
                        *d += dl * kv;
                    }
                }
            }
            (dlogit, dq)
        })
        .collect();

    let mut dq = Vec::with_capacity(q.numel());
    let mut dlogits = Vec::with_capacity(lead * nnz * heads);
    for (dl, d) in per_query {
        dlogits.extend(dl);
        dq.extend(d);
    }

    // Pass 2, per key: gather contributions in ascending query order.
    let by_key = keys.transposed();
    let per_key: Vec<(Vec<T>, Vec<T>)> = (0..lead * seq)
        .into_par_iter()
        .map(|row| {
            let (b, key) = (row / seq, row % seq);
            let base = b * seq * width;
            let mut dk = vec![T::zero(); width];
            let mut dv = vec![T::zero(); width];
            for &(s, pos) in &by_key[key] {
                let qrow = base + s * width;
                let idx = (b * nnz + pos) * heads;
                for h in 0..heads {
                    let off = h * head_dim;
                    let (dl, p) = (dlogits[idx + h], probs[idx + h]);
                    let qs = &qd[qrow + off..qrow + off + head_dim];
                    let gs = &grad_out[qrow + off..qrow + off + head_dim];
                    for c in 0..head_dim {
                        dk[off + c] += dl * qs[c];
                        dv[off + c] += p * gs[c];
                    }
                }
            }
            (dk, dv)
        })
        .collect();

    let mut dk = Vec::with_capacity(k.numel());
    let mut dv = Vec::with_capacity(v.numel());
    for (a, b) in per_key {
        dk.extend(a);
        dv.extend(b);
    }
    (dq, dk, dv)
}

/// `softmax(QKᵀ/√d restricted to mask) · V` for single-head `[S, d]` inputs,
/// built from dense tensor ops.
pub fn masked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Mask,
) -> Result<Tensor<T>> {
    let &[s, d] = q.shape() else {
        return Err(Error::shape(format!("masked_attention needs [S, d], got {:?}", q.shape())));
    };
    if k.shape() != q.shape() || v.shape() != q.shape() || mask.shape() != [s, s] {
        return Err(Error::shape("masked_attention operand shapes disagree"));
    }
    let kt = tensor::transpose2d(k)?;
    let scale = T::one() / T::from_usize(d).sqrt();
    let logits = tensor::matmul(q, &kt)?.map(|x| x * scale);
    let probs = tensor::masked_softmax_lastdim(&logits, mask)?;
    tensor::matmul(&probs, v)
}

/// Projection weights for one branch; `width` must divide into `heads`.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn width(&self) -> usize {
        self.wq.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let w = self.width();
        for m in [&self.wq, &self.wk, &self.wv] {
            if m.shape() != [w, w] {
                return Err(Error::shape(format!("projection shape {:?}, want [{w}, {w}]", m.shape())));
            }
        }
        if self.heads == 0 || w % self.heads != 0 {
            return Err(Error::config(format!("width {w} not divisible by {} heads", self.heads)));
        }
        Ok(())
    }
}

/// Tape handles for a branch's projections.
#[derive(Debug, Clone, Copy)]
pub struct BranchVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Projects `x[B, S, c]` to Q, K, V and runs per-head attention over `keys`.
pub fn branch_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: BranchVars,
    heads: usize,
    keys: &Arc<KeySets>,
) -> Result<Var> {
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    tape.attention(q, k, v, Arc::clone(keys), heads)
}

/// Evaluates [`branch_attention`] for `x[B, S, c]` under `geom`, without gradients.
pub fn branch_attention_eval<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    geom: &AttentionGeometry,
) -> Result<Tensor<T>> {
    params.validate()?;
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != geom.tokens() || shape[2] != params.width() {
        return Err(Error::shape(format!(
            "branch input {shape:?} does not match {} tokens x {} channels",
            geom.tokens(),
            params.width()
        )));
    }
    let keys = Arc::new(KeySets::from_geometry(geom)?);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = BranchVars {
        wq: tape.constant(params.wq.clone()),
        wk: tape.constant(params.wk.clone()),
        wv: tape.constant(params.wv.clone()),
    };
    let out = branch_attention(&mut tape, xv, w, params.heads, &keys)?;
    Ok(tape.value(out).clone())
}

/// Dense reference for a branch: per-head [`masked_attention`] against a full
/// `S×S` mask, heads concatenated.
pub fn branch_attention_dense<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    mask: &Mask,
) -> Result<Tensor<T>> {
    params.validate()?;
    let &[b, s, c] = x.shape() else {
        return Err(Error::shape(format!("branch input must be [B, S, c], got {:?}", x.shape())));
    };
    let hd = c / params.heads;
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        let xb = Tensor::new([s, c], x.data()[bi * s * c..(bi + 1) * s * c].to_vec())?;
        let q = tensor::matmul(&xb, &params.wq)?;
        let k = tensor::matmul(&xb, &params.wk)?;
        let v = tensor::matmul(&xb, &params.wv)?;
        for h in 0..params.heads {
            let cols = |t: &Tensor<T>| {
                Tensor::from_fn([s, hd], |i| t.data()[(i / hd) * c + h * hd + i % hd])
            };
            let o = masked_attention(&cols(&q), &cols(&k), &cols(&v), mask)?;
            for i in 0..s {
                for j in 0..hd {
                    out[(bi * s + i) * c + h * hd + j] = o.data()[i * hd + j];
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}
