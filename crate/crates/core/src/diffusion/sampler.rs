use std::cell::RefCell;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{predict, FrameTimesteps, ModelConfig, ModelParams};
use crate::rng::Stream;
use crate::tensor::{Scalar, Tensor};

use super::schedule::NoiseSchedule;

/// One read of an emitted frame while generating another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FrameRead {
    pub generating: usize,
    pub frame: usize,
}

/// Reads recorded by a [`FrameStore`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct AccessAudit {
    pub reads: usize,
    pub future_reads: usize,
    pub max_frame_read: Vec<Option<usize>>,
}

/// Append-only store of finished token frames that logs every read.
#[derive(Debug)]
pub struct FrameStore<T> {
    frames: Vec<Tensor<T>>,
    log: RefCell<Vec<FrameRead>>,
}

impl<T: Scalar> FrameStore<T> {
    pub fn new() -> Self {
        Self {
            frames: Vec::new(),
            log: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, frame: Tensor<T>) {
        self.frames.push(frame);
    }

    /// Returns frame `frame` on behalf of the frame being generated.
    pub fn read(&self, generating: usize, frame: usize) -> Result<&Tensor<T>> {
        self.log.borrow_mut().push(FrameRead { generating, frame });
        self.frames.get(frame).ok_or(Error::OutOfRange {
            what: "frame",
            value: frame,
            bound: self.frames.len(),
        })
    }

    pub fn frames(&self) -> &[Tensor<T>] {
        &self.frames
    }

    pub fn audit(&self, generated: usize) -> AccessAudit {
        let log = self.log.borrow();
        let mut max_frame_read = vec![None; generated];
        for r in log.iter() {
            if let Some(slot) = max_frame_read.get_mut(r.generating) {
                *slot = Some(slot.map_or(r.frame, |m: usize| m.max(r.frame)));
            }
        }
        AccessAudit {
            reads: log.len(),
            future_reads: log.iter().filter(|r| r.frame >= r.generating).count(),
            max_frame_read,
        }
    }
}

impl<T: Scalar> Default for FrameStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput<T> {
    /// `[n_frames, H, W, C]`.
    pub video: Tensor<T>,
    pub audit: AccessAudit,
}

fn stack<T: Scalar>(frames: &[&Tensor<T>], shape_tail: &[usize]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(frames.iter().map(|f| f.numel()).sum());
    let mut t = 0;
    for f in frames {
        data.extend_from_slice(f.data());
        t += f.shape()[0];
    }
    let mut shape = vec![1, t];
    shape.extend_from_slice(shape_tail);
    Tensor::new(shape, data)
}

/// Generates `n_frames` latent frames left to right, one token frame at a
/// time. Finished frames are fed back as clean context at timestep 0 while
/// the new frame runs the full ancestral chain `N−1, …, 0`. When the clip
/// outgrows the model's frame count, only the most recent frames are used as
/// context. `observer` sees the finished frames after each one is emitted.
pub fn sample_autoregressive_with<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    sched: &NoiseSchedule,
    n_frames: usize,
    context: Option<&Tensor<T>>,
    seed: u64,
    mut observer: impl FnMut(usize, &[Tensor<T>]),
) -> Result<SampleOutput<T>> {
    cfg.validate()?;
    if sched.steps() != cfg.diffusion_steps {
        return Err(Error::config(format!(
            "schedule has {} steps, model expects {}",
            sched.steps(),
            cfg.diffusion_steps
        )));
    }
    let q = cfg.patch.temporal;
    let g = cfg.grid;
    let tail = [g.height, g.width, cfg.in_channels];
    if n_frames == 0 || n_frames % q != 0 {
        return Err(Error::config(format!(
            "frame count {n_frames} must be a positive multiple of the temporal patch {q}"
        )));
    }
    let mut store = FrameStore::new();
    if let Some(ctx) = context {
        let shape = ctx.shape();
        if shape.len() != 4 || shape[1..] != tail {
            return Err(Error::shape(format!("context must be [T, {}, {}, {}], got {shape:?}", tail[0], tail[1], tail[2])));
        }
        if shape[0] > n_frames {
            return Err(Error::config(format!(
                "context of {} frames exceeds the {n_frames} requested",
                shape[0]
            )));
        }
        if shape[0] % q != 0 {
            return Err(Error::config(format!("context length {} not a multiple of {q}", shape[0])));
        }
        let per = q * tail.iter().product::<usize>();
        for chunk in ctx.data().chunks(per) {
            store.push(Tensor::new([q, tail[0], tail[1], tail[2]], chunk.to_vec())?);
        }
    }
    let window = g.frames / q;
    let chunk_shape = [q, tail[0], tail[1], tail[2]];
    let chunk_len: usize = chunk_shape.iter().product();
    let root = Stream::new(seed);
    let n_tok = n_frames / q;

    for n in store.len()..n_tok {
        let lo = (n + 1).saturating_sub(window);
        let frame_key = root.child(n as u64);
        let start = frame_key.child(sched.steps() as u64);
        let mut x = Tensor::from_fn(chunk_shape, |i| T::lit(start.normal(i as u64)));
        for t in (0..sched.steps()).rev() {
            let mut parts: Vec<&Tensor<T>> = (lo..n).map(|f| store.read(n, f)).collect::<Result<_>>()?;
            parts.push(&x);
            let input = stack(&parts, &tail)?;
            let mut steps = vec![0; n - lo];
            steps.push(t);
            let ft = [FrameTimesteps::new(steps, sched.steps())?];
            let eps = predict(cfg, params, &input, &ft)?;
            let eps = &eps.data()[eps.numel() - chunk_len..];

            let beta = sched.beta(t)?;
            let alpha_bar = sched.alpha_bar(t)?;
            let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
            let coef = beta / (1.0 - alpha_bar).sqrt();
            let sigma = if t > 0 { beta.sqrt() } else { 0.0 };
            let z = frame_key.child(t as u64);
            for (i, (v, &e)) in x.data_mut().iter_mut().zip(eps).enumerate() {
                let mean = inv_sqrt_alpha * (v.as_f64() - coef * e.as_f64());
                let noise = if t > 0 { sigma * z.normal(i as u64) } else { 0.0 };
                *v = T::lit(mean + noise);
            }
        }
        store.push(x);
        observer(n, store.frames());
    }

    let parts: Vec<&Tensor<T>> = store.frames().iter().collect();
    let video = stack(&parts, &tail)?.reshape([n_frames, tail[0], tail[1], tail[2]])?;
    Ok(SampleOutput {
        video,
        audit: store.audit(n_tok),
    })
}

pub fn sample_autoregressive<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    sched: &NoiseSchedule,
    n_frames: usize,
    context: Option<&Tensor<T>>,
    seed: u64,
) -> Result<SampleOutput<T>> {
    sample_autoregressive_with(cfg, params, sched, n_frames, context, seed, |_, _| {})
}
