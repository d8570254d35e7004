//! Fixed sinusoidal embeddings and the patchify permutation.

use crate::error::{Error, Result};
use crate::geometry::Grid;
use crate::tensor::{Scalar, Tensor};

/// `[sin(pos·f_0), …, sin(pos·f_{k−1}), cos(pos·f_0), …]` with
/// `f_i = 10000^(−i/k)`, `k = dim / 2`.
pub fn sinusoid(pos: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
}

/// Embeddings of `timesteps`, shape `[n, dim]`.
pub fn timestep_embedding<T: Scalar>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let mut row = vec![0.0; dim];
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        sinusoid(t as f64, dim, &mut row);
        data.extend(row.iter().map(|&v| T::lit(v)));
    }
    Tensor::new([timesteps.len(), dim], data).expect("sized above")
}

/// Additive space-time position embedding, shape `[T, H, W, hidden]`. The
/// channels are split into three equal even-width blocks for the `t`, `i`
/// and `j` axes; leftover channels stay zero.
pub fn position_embedding<T: Scalar>(grid: Grid, hidden: usize) -> Tensor<T> {
    let per_axis = 2 * (hidden / 6);
    let mut buf = vec![0.0; per_axis];
    let mut data = vec![T::zero(); grid.tokens() * hidden];
    for t in 0..grid.frames {
        for i in 0..grid.height {
            for j in 0..grid.width {
                let base = ((t * grid.height + i) * grid.width + j) * hidden;
                for (axis, pos) in [t, i, j].into_iter().enumerate() {
                    sinusoid(pos as f64, per_axis, &mut buf);
                    for (c, &v) in buf.iter().enumerate() {
                        data[base + axis * per_axis + c] = T::lit(v);
                    }
                }
            }
        }
    }
    Tensor::new([grid.frames, grid.height, grid.width, hidden], data).expect("sized above")
}

fn patch_dims(shape: &[usize], p: usize, q: usize) -> Result<[usize; 5]> {
    let &[b, t, h, w, c] = shape else {
        return Err(Error::shape(format!("video must be [B, T, H, W, C], got {shape:?}")));
    };
    if p == 0 || q == 0 || t % q != 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!(
            "video {t}x{h}x{w} not divisible by patch (q={q}, p={p})"
        )));
    }
    Ok([b, t, h, w, c])
}

/// Source index for each element of the patchified tensor. Patch channels
/// are ordered `(dt, di, dj, c)`.
pub fn patchify_index(shape: &[usize], p: usize, q: usize) -> Result<Vec<usize>> {
    let [b, t, h, w, c] = patch_dims(shape, p, q)?;
    let (tq, hp, wp) = (t / q, h / p, w / p);
    let mut idx = Vec::with_capacity(b * t * h * w * c);
    for bi in 0..b {
        for ti in 0..tq {
            for ii in 0..hp {
                for ji in 0..wp {
                    for dt in 0..q {
                        for di in 0..p {
                            for dj in 0..p {
                                let src = (((bi * t + ti * q + dt) * h + ii * p + di) * w + ji * p + dj) * c;
                                idx.extend(src..src + c);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse of [`patchify_index`]: for each latent element, its position in
/// the patchified tensor.
pub fn unpatchify_index(shape: &[usize], p: usize, q: usize) -> Result<Vec<usize>> {
    let forward = patchify_index(shape, p, q)?;
    let mut inv = vec![0; forward.len()];
    for (dst, &src) in forward.iter().enumerate() {
        inv[src] = dst;
    }
    Ok(inv)
}

pub fn patched_shape(shape: &[usize], p: usize, q: usize) -> Result<[usize; 5]> {
    let [b, t, h, w, c] = patch_dims(shape, p, q)?;
    Ok([b, t / q, h / p, w / p, c * p * p * q])
}

/// `[B, T, H, W, C] → [B, T/q, H/p, W/p, C·p²·q]`.
pub fn patchify<T: Scalar>(video: &Tensor<T>, p: usize, q: usize) -> Result<Tensor<T>> {
    let idx = patchify_index(video.shape(), p, q)?;
    let src = video.data();
    Tensor::new(
        patched_shape(video.shape(), p, q)?,
        idx.iter().map(|&i| src[i]).collect(),
    )
}

/// Inverse of [`patchify`], given the latent shape to restore.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, latent_shape: &[usize], p: usize, q: usize) -> Result<Tensor<T>> {
    if tokens.shape() != patched_shape(latent_shape, p, q)? {
        return Err(Error::shape(format!(
            "tokens {:?} do not patchify {latent_shape:?}",
            tokens.shape()
        )));
    }
    let idx = unpatchify_index(latent_shape, p, q)?;
    let src = tokens.data();
    Tensor::new(latent_shape, idx.iter().map(|&i| src[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Cursor, Stream};
    use proptest::prelude::*;

    #[test]
    fn unit_patch_is_identity() {
        let x = Tensor::<f32>::from_fn([2, 3, 4, 5, 2], |i| i as f32);
        assert_eq!(patchify(&x, 1, 1).unwrap(), x);
    }

    #[test]
    fn patched_shape_arithmetic() {
        let x = Tensor::<f32>::zeros([1, 8, 16, 16, 4]);
        assert_eq!(patchify(&x, 2, 2).unwrap().shape(), &[1, 4, 8, 8, 32]);
    }

    #[test]
    fn patch_channels_are_ordered_time_row_col_channel() {
        let x = Tensor::<f64>::from_fn([1, 2, 2, 2, 1], |i| i as f64);
        let y = patchify(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn indivisible_video_is_a_config_error() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4, 1]);
        assert!(matches!(patchify(&x, 2, 2), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn patchify_round_trips(b in 1usize..3, tq in 1usize..3, hp in 1usize..3, wp in 1usize..3,
                                c in 1usize..3, p in 1usize..3, q in 1usize..3, seed in any::<u64>()) {
            let shape = [b, tq * q, hp * p, wp * p, c];
            let mut cur = Cursor::new(Stream::new(seed));
            let x = Tensor::<f32>::from_fn(shape, |_| cur.normal() as f32);
            let y = patchify(&x, p, q).unwrap();
            prop_assert!(unpatchify(&y, &shape, p, q).unwrap().bit_eq(&x));
        }
    }

    #[test]
    fn position_embedding_layout() {
        let pe = position_embedding::<f64>(Grid::new(2, 3, 3), 14);
        assert_eq!(pe.shape(), &[2, 3, 3, 14]);
        // per-axis width 4: t block, i block, j block, then two zero channels.
        let at = |t, i, j, c| pe.get(&[t, i, j, c]).unwrap();
        assert_eq!(at(1, 0, 0, 0), 1f64.sin());
        assert_eq!(at(0, 2, 0, 4), 2f64.sin());
        assert_eq!(at(0, 0, 1, 8), 1f64.sin());
        assert_eq!(at(1, 2, 1, 12), 0.0);
        assert_eq!(at(1, 2, 1, 13), 0.0);
    }

    #[test]
    fn distinct_timesteps_embed_differently() {
        let e = timestep_embedding::<f64>(&[0, 1, 49], 8);
        assert_eq!(e.shape(), &[3, 8]);
        assert_eq!(&e.data()[..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_ne!(&e.data()[8..16], &e.data()[16..24]);
    }
}
