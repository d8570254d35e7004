use crate::error::{Error, Result};
use crate::model::FrameTimesteps;
use crate::rng::Stream;
use crate::tensor::{Scalar, Tensor};

use super::schedule::NoiseSchedule;

const NOISE_TAG: u64 = 1;
const TIMESTEP_TAG: u64 = 2;

/// A noised clip together with the noise that produced it.
#[derive(Debug, Clone)]
pub struct NoisyVideo<T> {
    pub x_t: Tensor<T>,
    pub eps: Tensor<T>,
    pub ft: FrameTimesteps,
}

/// Standard normal noise for a `[T, H, W, C]` clip; the value at
/// `(frame, position)` depends only on `seed`, `frame` and `position`.
pub fn frame_noise<T: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    let &[frames, h, w, c] = shape else {
        return Err(Error::shape(format!("video must be [T, H, W, C], got {shape:?}")));
    };
    let per_frame = h * w * c;
    let base = Stream::new(seed).child(NOISE_TAG);
    let mut data = Vec::with_capacity(frames * per_frame);
    for f in 0..frames {
        let s = base.child(f as u64);
        data.extend((0..per_frame).map(|p| T::lit(s.normal(p as u64))));
    }
    Tensor::new(shape.to_vec(), data)
}

/// Latent frames per entry of `ft`.
fn frames_per_step(frames: usize, ft: &FrameTimesteps) -> Result<usize> {
    if ft.is_empty() || frames % ft.len() != 0 {
        return Err(Error::shape(format!(
            "{} timesteps do not evenly cover {frames} frames",
            ft.len()
        )));
    }
    Ok(frames / ft.len())
}

/// `x_t = √ᾱ·x0 + √(1 − ᾱ)·ε` per frame, with latent frame `f` using
/// timestep `ft[f / q]` where `q` is the temporal patch size implied by the
/// length of `ft`.
pub fn add_noise_per_frame<T: Scalar>(
    x0: &Tensor<T>,
    ft: &FrameTimesteps,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<NoisyVideo<T>> {
    ft.check(sched.steps())?;
    let eps = frame_noise::<T>(x0.shape(), seed)?;
    let q = frames_per_step(x0.shape()[0], ft)?;
    let per_frame = x0.numel() / x0.shape()[0];
    let mut x_t = x0.clone();
    for (f, (xs, es)) in x_t
        .data_mut()
        .chunks_mut(per_frame)
        .zip(eps.data().chunks(per_frame))
        .enumerate()
    {
        let (a, s) = sched.mix(ft.as_slice()[f / q])?;
        let (a, s) = (T::lit(a), T::lit(s));
        for (x, &e) in xs.iter_mut().zip(es) {
            *x = a * *x + s * e;
        }
    }
    Ok(NoisyVideo {
        x_t,
        eps,
        ft: ft.clone(),
    })
}

/// Timesteps drawn i.i.d. uniform over `[0, N)` for each token frame.
pub fn sample_timesteps(frames: usize, steps: usize, seed: u64) -> Result<FrameTimesteps> {
    let s = Stream::new(seed).child(TIMESTEP_TAG);
    FrameTimesteps::new(
        (0..frames).map(|f| s.below(f as u64, steps as u64) as usize).collect(),
        steps,
    )
}

/// A noised `[B, T, H, W, C]` batch.
#[derive(Debug, Clone)]
pub struct NoisyBatch<T> {
    pub x_t: Tensor<T>,
    pub eps: Tensor<T>,
    pub ft: Vec<FrameTimesteps>,
}

/// Noises every clip of `x0[B, T, H, W, C]` with its own timesteps and
/// noise, all derived from `seed` and the clip index.
pub fn noisy_batch<T: Scalar>(
    x0: &Tensor<T>,
    token_frames: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<NoisyBatch<T>> {
    let &[b, t, h, w, c] = x0.shape() else {
        return Err(Error::shape(format!("batch must be [B, T, H, W, C], got {:?}", x0.shape())));
    };
    let clip = t * h * w * c;
    let root = Stream::new(seed);
    let mut x_t = Vec::with_capacity(x0.numel());
    let mut eps = Vec::with_capacity(x0.numel());
    let mut ft = Vec::with_capacity(b);
    for (i, chunk) in x0.data().chunks(clip).enumerate() {
        let clip_seed = root.child(i as u64).bits(0);
        let steps = sample_timesteps(token_frames, sched.steps(), clip_seed)?;
        let one = Tensor::new([t, h, w, c], chunk.to_vec())?;
        let nv = add_noise_per_frame(&one, &steps, sched, clip_seed)?;
        x_t.extend_from_slice(nv.x_t.data());
        eps.extend_from_slice(nv.eps.data());
        ft.push(steps);
    }
    Ok(NoisyBatch {
        x_t: Tensor::new(x0.shape().to_vec(), x_t)?,
        eps: Tensor::new(x0.shape().to_vec(), eps)?,
        ft,
    })
}

/// Mean squared error over all elements.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse operands {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p - t).as_f64();
            d * d
        })
        .sum();
    Ok(sum / pred.numel().max(1) as f64)
}

/// ε-prediction loss of `predict` on a freshly noised batch.
pub fn denoising_loss_with<T, F>(
    predict: F,
    x0: &Tensor<T>,
    token_frames: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64>
where
    T: Scalar,
    F: FnOnce(&NoisyBatch<T>) -> Result<Tensor<T>>,
{
    let batch = noisy_batch(x0, token_frames, sched, seed)?;
    let pred = predict(&batch)?;
    mse(&pred, &batch.eps)
}
