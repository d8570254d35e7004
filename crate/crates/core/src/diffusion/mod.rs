//! The per-frame forward noising process, pooled-noise statistics, the
//! ε-prediction loss and the autoregressive sampler.

mod noise;
mod sampler;
mod schedule;
mod snr;

pub use noise::{
    add_noise_per_frame, denoising_loss_with, frame_noise, mse, noisy_batch, sample_timesteps, NoisyBatch,
    NoisyVideo,
};
pub use sampler::{
    sample_autoregressive, sample_autoregressive_with, AccessAudit, FrameRead, FrameStore, SampleOutput,
};
pub use schedule::{NoiseSchedule, ScheduleConfig, MAX_BETA, REFERENCE_STEPS};
pub use snr::{
    mc_pooled_noise_var, pooled_noise_var, pooled_snr_gain, run_snr_experiment, sample_variance, Estimate,
    Signal, SnrRow,
};

use crate::error::Result;
use crate::model::{predict, ModelConfig, ModelParams};
use crate::tensor::{Scalar, Tensor};

/// ε-prediction loss of the model on `x0[B, T, H, W, C]` with per-frame
/// timesteps drawn from `seed`.
pub fn denoising_loss<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    x0: &Tensor<T>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let frames = cfg.token_grid_for(x0.shape().get(1).copied().unwrap_or(0))?.frames;
    denoising_loss_with(|b| predict(cfg, params, &b.x_t, &b.ft), x0, frames, sched, seed)
}
