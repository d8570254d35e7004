//! Forward kernels over plain tensors. The tape reuses these for its forward
//! pass, so every accumulation order here is the order the model sees.

use rayon::prelude::*;

use super::{Mask, Scalar, Tensor};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// `C[m,n] = A[m,k] · B[k,n]`. Each output row accumulates over `k` in
/// ascending order; rows are independent so parallel execution is bit-stable.
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    if n == 0 {
        return c;
    }
    let row = |(i, out): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `C[m,k] = A[m,n] · B[k,n]ᵀ`.
pub(crate) fn mm_a_bt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    if k == 0 {
        return c;
    }
    let row = |(i, out): (usize, &mut [T])| {
        let a_row = &a[i * n..(i + 1) * n];
        for (j, o) in out.iter_mut().enumerate() {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        c.chunks_mut(k).enumerate().for_each(row);
    }
    c
}

/// `C[k,n] = A[m,k]ᵀ · B[m,n]`, accumulating over `m` in ascending order.
pub(crate) fn mm_at_b<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    if n == 0 {
        return c;
    }
    let row = |(kk, out): (usize, &mut [T])| {
        for i in 0..m {
            let aik = a[i * k + kk];
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new([m, n], mm(a.data(), b.data(), m, k, n))
}

pub fn transpose2d<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let &[m, n] = a.shape() else {
        return Err(Error::shape(format!(
            "transpose2d needs rank 2, got {:?}",
            a.shape()
        )));
    };
    let d = a.data();
    Ok(Tensor::from_fn([n, m], |idx| {
        let (j, i) = (idx / m, idx % m);
        d[i * n + j]
    }))
}

/// Softmax over the last axis with masked entries excluded. Masked outputs are
/// exactly zero; a row with no allowed entry is an error.
pub fn masked_softmax_lastdim<T: Scalar>(x: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    if x.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "mask shape {:?} does not match input {:?}",
            mask.shape(),
            x.shape()
        )));
    }
    let n = *x.shape().last().ok_or_else(|| Error::shape("softmax on a rank-0 tensor"))?;
    let mut out = vec![T::zero(); x.numel()];
    if n == 0 {
        return Tensor::new(x.shape(), out);
    }
    for (row, ((xs, ms), os)) in x
        .data()
        .chunks(n)
        .zip(mask.data().chunks(n))
        .zip(out.chunks_mut(n))
        .enumerate()
    {
        let max = xs
            .iter()
            .zip(ms)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or(Error::FullyMasked { row })?;
        let mut denom = T::zero();
        for ((o, &v), &m) in os.iter_mut().zip(xs).zip(ms) {
            if m {
                *o = (v - max).exp();
                denom += *o;
            }
        }
        for o in os.iter_mut() {
            *o = *o / denom;
        }
    }
    Tensor::new(x.shape(), out)
}

fn spatial_dims(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [lead @ .., h, w, c] => Ok((lead.iter().product(), *h, *w, *c)),
        _ => Err(Error::shape(format!("{op} needs rank >= 3, got {shape:?}"))),
    }
}

/// Mean over non-overlapping `r×r` blocks of the `H, W` axes of `[..., H, W, c]`.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (lead, h, w, c) = spatial_dims(x.shape(), "avg_pool2d")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::config(format!(
            "pool factor {r} does not divide spatial extents {h}x{w}"
        )));
    }
    let (ho, wo) = (h / r, w / r);
    let inv = T::one() / T::from_usize(r * r);
    let src = x.data();
    let mut out = vec![T::zero(); lead * ho * wo * c];
    for l in 0..lead {
        for oi in 0..ho {
            for oj in 0..wo {
                let o = ((l * ho + oi) * wo + oj) * c;
                for di in 0..r {
                    for dj in 0..r {
                        let s = ((l * h + oi * r + di) * w + oj * r + dj) * c;
                        for ch in 0..c {
                            out[o + ch] += src[s + ch];
                        }
                    }
                }
                for v in &mut out[o..o + c] {
                    *v *= inv;
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let rank = shape.len();
    shape[rank - 3] = ho;
    shape[rank - 2] = wo;
    Tensor::new(shape, out)
}

/// Replicates each cell of `[..., H, W, c]` into an `r×r` block.
pub fn upsample_nearest2d<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (lead, h, w, c) = spatial_dims(x.shape(), "upsample_nearest2d")?;
    if r == 0 {
        return Err(Error::config("upsample factor must be >= 1"));
    }
    let (ho, wo) = (h * r, w * r);
    let src = x.data();
    let mut out = Vec::with_capacity(lead * ho * wo * c);
    for l in 0..lead {
        for oi in 0..ho {
            for oj in 0..wo {
                let s = ((l * h + oi / r) * w + oj / r) * c;
                out.extend_from_slice(&src[s..s + c]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let rank = shape.len();
    shape[rank - 3] = ho;
    shape[rank - 2] = wo;
    Tensor::new(shape, out)
}

/// Per-row statistics `(mean, 1/sqrt(var + eps))` over the last axis.
pub(crate) fn row_stats<T: Scalar>(x: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::lit(LN_EPS);
    let inv_c = T::one() / T::from_usize(c);
    x.chunks(c)
        .map(|row| {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            (mean, T::one() / (var + eps).sqrt())
        })
        .unzip()
}

/// Layer normalization over the last axis with a fixed epsilon of 1e-5.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x.shape().last().ok_or_else(|| Error::shape("layer_norm on rank 0"))?;
    if c == 0 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "layer_norm over {c} channels with gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let (mean, rstd) = row_stats(x.data(), c);
    let mut out = Vec::with_capacity(x.numel());
    for (r, row) in x.data().chunks(c).enumerate() {
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            out.push((v - mean[r]) * rstd[r] * g + b);
        }
    }
    Tensor::new(x.shape(), out)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let u = k * (x + c * x * x * x);
    let th = u.tanh();
    let du = k * (T::one() + T::lit(3.0) * c * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}
