use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{avg_pool2d, Tensor};

/// Variance of the mean of an `r×r` block of i.i.d. noise with variance `sigma2`.
pub fn pooled_noise_var(sigma2: f64, r: usize) -> Result<f64> {
    if r == 0 {
        return Err(Error::config("pool factor must be >= 1"));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::config(format!("noise variance must be >= 0, got {sigma2}")));
    }
    Ok(sigma2 / (r * r) as f64)
}

/// `SNR(pooled) / SNR(original)` for signal `x0[..., H, W, C]` under i.i.d.
/// noise of variance `sigma2`, with SNR = mean signal power / noise variance.
pub fn pooled_snr_gain(x0: &Tensor<f64>, sigma2: f64, r: usize) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::config(format!("noise variance must be > 0, got {sigma2}")));
    }
    let power = x0.sq_norm() / x0.numel() as f64;
    if power == 0.0 {
        return Err(Error::config("signal power is zero"));
    }
    let pooled = avg_pool2d(x0, r)?;
    let pooled_power = pooled.sq_norm() / pooled.numel() as f64;
    let snr = power / sigma2;
    let pooled_snr = pooled_power / pooled_noise_var(sigma2, r)?;
    Ok(pooled_snr / snr)
}

/// A Monte-Carlo estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn within(&self, target: f64, std_errs: f64) -> bool {
        (self.value - target).abs() <= std_errs * self.std_err
    }
}

const CHUNK: usize = 4096;

/// Sample variance of `count` draws of `draw(i)` with the standard error
/// `sqrt((m4 − s⁴) / n)`, accumulated in fixed-size chunks in index order.
pub fn sample_variance(count: usize, draw: impl Fn(usize) -> f64 + Sync) -> Result<Estimate> {
    if count < 2 {
        return Err(Error::config("need at least two samples"));
    }
    let chunks = count.div_ceil(CHUNK);
    let sums: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(count)).map(&draw).sum())
        .collect();
    let mean = sums.iter().sum::<f64>() / count as f64;
    let moments: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            (c * CHUNK..((c + 1) * CHUNK).min(count)).fold((0.0, 0.0), |(m2, m4), i| {
                let d = draw(i) - mean;
                let d2 = d * d;
                (m2 + d2, m4 + d2 * d2)
            })
        })
        .collect();
    let n = count as f64;
    let m2 = moments.iter().map(|m| m.0).sum::<f64>() / n;
    let m4 = moments.iter().map(|m| m.1).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0);
    Ok(Estimate {
        value: var,
        std_err: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
    })
}

/// Empirical variance of `r×r` block means of i.i.d. `N(0, sigma2)` noise,
/// over `blocks` blocks.
pub fn mc_pooled_noise_var(sigma2: f64, r: usize, blocks: usize, seed: u64) -> Result<Estimate> {
    pooled_noise_var(sigma2, r)?;
    let s = Stream::new(seed);
    let sigma = sigma2.sqrt();
    let rr = r * r;
    sample_variance(blocks, |b| {
        let base = (b * rr) as u64;
        (0..rr as u64).map(|k| sigma * s.normal(base + k)).sum::<f64>() / rr as f64
    })
}

/// Test signals for the SNR experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Constant,
    Checkerboard,
}

impl Signal {
    pub const ALL: [Signal; 2] = [Signal::Constant, Signal::Checkerboard];

    /// A `side×side×1` image: all ones, or `±1` alternating per pixel.
    pub fn image(self, side: usize) -> Tensor<f64> {
        Tensor::from_fn([side, side, 1], |i| match self {
            Signal::Constant => 1.0,
            Signal::Checkerboard => {
                if (i / side + i % side) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
        })
    }
}

/// One `(σ, r, signal)` row of the SNR experiment.
#[derive(Debug, Clone, Serialize)]
pub struct SnrRow {
    pub sigma: f64,
    pub r: usize,
    pub signal: Signal,
    pub var_expected: f64,
    pub var_empirical: f64,
    pub var_std_err: f64,
    pub gain_expected: f64,
    pub gain_empirical: f64,
    pub gain_std_err: f64,
}

/// Pooled-noise variance and SNR gain for every `(σ, r)` pair and both test
/// signals, each estimated from `trials` blocks.
pub fn run_snr_experiment(sigmas: &[f64], rs: &[usize], trials: usize, seed: u64) -> Result<Vec<SnrRow>> {
    let root = Stream::new(seed);
    let mut rows = Vec::new();
    for (si, &sigma) in sigmas.iter().enumerate() {
        if !(sigma > 0.0) {
            return Err(Error::config(format!("sigma must be > 0, got {sigma}")));
        }
        let sigma2 = sigma * sigma;
        for (ri, &r) in rs.iter().enumerate() {
            let key = root.child(si as u64).child(ri as u64).bits(0);
            let raw = mc_pooled_noise_var(sigma2, 1, trials, key)?;
            let pooled = mc_pooled_noise_var(sigma2, r, trials, key ^ 1)?;
            let expected_var = pooled_noise_var(sigma2, r)?;
            for signal in Signal::ALL {
                let img = signal.image(2 * r.max(1));
                let power = img.sq_norm() / img.numel() as f64;
                let pooled_img = avg_pool2d(&img, r)?;
                let pooled_power = pooled_img.sq_norm() / pooled_img.numel() as f64;
                // gain = (P'/v') / (P/v); first-order error propagation over v and v'.
                let gain = (pooled_power / pooled.value) / (power / raw.value);
                let rel = ((raw.std_err / raw.value).powi(2) + (pooled.std_err / pooled.value).powi(2)).sqrt();
                rows.push(SnrRow {
                    sigma,
                    r,
                    signal,
                    var_expected: expected_var,
                    var_empirical: pooled.value,
                    var_std_err: pooled.std_err,
                    gain_expected: pooled_snr_gain(&img, sigma2, r)?,
                    gain_empirical: gain,
                    gain_std_err: gain.abs() * rel,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_variance() {
        assert_eq!(pooled_noise_var(1.0, 2).unwrap(), 0.25);
        assert_eq!(pooled_noise_var(3.0, 1).unwrap(), 3.0);
        assert!(pooled_noise_var(1.0, 0).is_err());
    }

    #[test]
    fn gains_for_reference_signals() {
        let c = Signal::Constant.image(8);
        assert!((pooled_snr_gain(&c, 0.7, 2).unwrap() - 4.0).abs() < 1e-12);
        assert!((pooled_snr_gain(&c, 0.7, 1).unwrap() - 1.0).abs() < 1e-12);
        let cb = Signal::Checkerboard.image(8);
        assert!(pooled_snr_gain(&cb, 1.0, 2).unwrap().abs() < 1e-12);
        assert!(pooled_snr_gain(&c, 0.0, 2).is_err());
        assert!(pooled_snr_gain(&Tensor::zeros([2, 2, 1]), 1.0, 2).is_err());
    }

    #[test]
    fn sample_variance_of_a_known_sequence() {
        // 0, 1, 0, 1, ... has unbiased variance n / (4(n-1)).
        let e = sample_variance(1000, |i| (i % 2) as f64).unwrap();
        assert!((e.value - 1000.0 / (4.0 * 999.0)).abs() < 1e-12);
    }
}
