//! Perturbation audit of end-to-end frame causality.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{predict, FrameTimesteps, ModelConfig, ModelParams};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct AuditTrial {
    pub seed: u64,
    /// Last token frame whose outputs must not move.
    pub t0: usize,
    /// Largest output change per latent frame.
    pub max_abs_dev_per_frame: Vec<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub causal: bool,
    pub trials: Vec<AuditTrial>,
    /// Per latent frame, the largest change seen while that frame was protected.
    pub max_abs_dev_per_frame: Vec<f64>,
    pub pass: bool,
}

/// For `trials` random `(params, input, t0)` triples, changes every input
/// frame after token frame `t0` and requires the outputs at frames up to
/// `t0` to stay bit-identical.
pub fn audit_causality(cfg: &ModelConfig, trials: usize, seed: u64) -> Result<AuditReport> {
    cfg.validate()?;
    let grid = cfg.token_grid()?;
    if grid.frames < 2 {
        return Err(Error::config("causality audit needs at least two token frames"));
    }
    let g = cfg.grid;
    let q = cfg.patch.temporal;
    let per_frame = g.height * g.width * cfg.in_channels;
    let shape = [1, g.frames, g.height, g.width, cfg.in_channels];
    let root = Stream::new(seed);
    let mut worst = vec![0.0f64; g.frames];
    let mut out = Vec::with_capacity(trials);

    for trial in 0..trials {
        let key = root.child(trial as u64);
        let trial_seed = key.bits(0);
        let params = ModelParams::<f32>::random(cfg, trial_seed, 0.5)?;
        let x = Tensor::from_fn(shape, |i| key.child(1).normal(i as u64) as f32);
        let t0 = key.below(1, (grid.frames - 1) as u64) as usize;
        let ft = [FrameTimesteps::new(
            (0..grid.frames)
                .map(|f| key.child(2).below(f as u64, cfg.diffusion_steps as u64) as usize)
                .collect(),
            cfg.diffusion_steps,
        )?];
        let keep = (t0 + 1) * q * per_frame;
        let mut perturbed = x.clone();
        for (i, v) in perturbed.data_mut()[keep..].iter_mut().enumerate() {
            *v = key.child(3).normal(i as u64) as f32;
        }
        let base = predict(cfg, &params, &x, &ft)?;
        let moved = predict(cfg, &params, &perturbed, &ft)?;
        let dev: Vec<f64> = base
            .data()
            .chunks(per_frame)
            .zip(moved.data().chunks(per_frame))
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| if x.to_bits() == y.to_bits() { 0.0 } else { (x - y).abs().max(f32::MIN_POSITIVE) as f64 })
                    .fold(0.0, f64::max)
            })
            .collect();
        let protected = (t0 + 1) * q;
        for f in 0..protected {
            worst[f] = worst[f].max(dev[f]);
        }
        out.push(AuditTrial {
            seed: trial_seed,
            t0,
            pass: dev[..protected].iter().all(|&d| d == 0.0),
            max_abs_dev_per_frame: dev,
        });
    }
    Ok(AuditReport {
        causal: cfg.causal,
        pass: out.iter().all(|t| t.pass),
        trials: out,
        max_abs_dev_per_frame: worst,
    })
}

/// Runs the audit on `cfg` and on the same model with causal masking off;
/// the second run is expected to fail.
pub fn audit_with_control(cfg: &ModelConfig, trials: usize, seed: u64) -> Result<(AuditReport, AuditReport)> {
    let main = audit_causality(cfg, trials, seed)?;
    let mut open = cfg.clone();
    open.causal = false;
    let control = audit_causality(&open, trials, seed)?;
    Ok((main, control))
}
