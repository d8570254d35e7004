use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step count at which the configured β endpoints apply unscaled.
pub const REFERENCE_STEPS: usize = 1000;

/// Upper limit for rescaled betas.
pub const MAX_BETA: f64 = 0.999;

/// Linear β endpoints. With `rescale` set, both endpoints are multiplied by
/// `REFERENCE_STEPS / N` (capped at [`MAX_BETA`]) so that short chains still
/// end near pure noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "ScheduleConfig::default_start")]
    pub beta_start: f64,
    #[serde(default = "ScheduleConfig::default_end")]
    pub beta_end: f64,
    #[serde(default = "ScheduleConfig::default_rescale")]
    pub rescale: bool,
}

impl ScheduleConfig {
    fn default_start() -> f64 {
        1e-4
    }

    fn default_end() -> f64 {
        2e-2
    }

    fn default_rescale() -> bool {
        true
    }

    pub fn build(&self, steps: usize) -> Result<NoiseSchedule> {
        if self.rescale && steps > 0 {
            let scale = REFERENCE_STEPS as f64 / steps as f64;
            let start = (self.beta_start * scale).min(MAX_BETA);
            let end = (self.beta_end * scale).min(MAX_BETA);
            NoiseSchedule::linear(steps, start, end)
        } else {
            NoiseSchedule::linear(steps, self.beta_start, self.beta_end)
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta_start: Self::default_start(),
            beta_end: Self::default_end(),
            rescale: Self::default_rescale(),
        }
    }
}

/// Discrete variance-preserving noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `steps` betas spaced linearly from `start` to `end` inclusive.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("noise schedule needs at least one step"));
        }
        if !(start > 0.0 && start <= end && end < 1.0) {
            return Err(Error::config(format!(
                "betas must satisfy 0 < start <= end < 1, got {start}, {end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// The default schedule for a chain of `steps`.
    pub fn for_steps(steps: usize) -> Result<Self> {
        ScheduleConfig::default().build(steps)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t,
                bound: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t])
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))`.
    pub fn mix(&self, t: usize) -> Result<(f64, f64)> {
        let a = self.alpha_bar(t)?;
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }
}
