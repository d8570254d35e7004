//! Synthetic clips: a square moving over a panning periodic background, and
//! flat single-color clips.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Per-frame displacement in pixels, `(rows, cols)`; positions wrap.
pub type Velocity = (i64, i64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    pub square: usize,
    pub square_velocity: Velocity,
    pub pan_velocity: Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ClipShape {
    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::config(format!("clip dimensions must be positive, got {:?}", self.dims())));
        }
        Ok(())
    }
}

fn wrap(x: i64, n: usize) -> usize {
    x.rem_euclid(n as i64) as usize
}

/// A `[T, H, W, C]` clip. The background is a smooth periodic pattern with
/// seed-dependent phases, translated by `pan_velocity` each frame; the square
/// has a seed-dependent color and start and moves by `square_velocity`.
pub fn gen_synthetic_video(shape: ClipShape, motion: MotionSpec, seed: u64) -> Result<Tensor<f32>> {
    shape.validate()?;
    let ClipShape {
        frames,
        height,
        width,
        channels,
    } = shape;
    if motion.square == 0 || motion.square > height || motion.square > width {
        return Err(Error::config(format!(
            "square side {} does not fit a {height}x{width} frame",
            motion.square
        )));
    }
    let s = Stream::new(seed);
    let phases: Vec<f64> = (0..channels).map(|c| s.uniform(c as u64) * std::f64::consts::TAU).collect();
    let colors: Vec<f64> = (0..channels).map(|c| if s.child(1).uniform(c as u64) < 0.5 { -1.0 } else { 1.0 }).collect();
    let start = (s.child(2).below(0, height as u64) as i64, s.child(2).below(1, width as u64) as i64);
    let tau = std::f64::consts::TAU;

    let mut data = Vec::with_capacity(frames * height * width * channels);
    for t in 0..frames as i64 {
        let (pi, pj) = (motion.pan_velocity.0 * t, motion.pan_velocity.1 * t);
        let (si, sj) = (
            wrap(start.0 + motion.square_velocity.0 * t, height),
            wrap(start.1 + motion.square_velocity.1 * t, width),
        );
        for i in 0..height {
            for j in 0..width {
                let bi = wrap(i as i64 - pi, height) as f64 / height as f64;
                let bj = wrap(j as i64 - pj, width) as f64 / width as f64;
                let inside = wrap(i as i64 - si as i64, height) < motion.square
                    && wrap(j as i64 - sj as i64, width) < motion.square;
                for c in 0..channels {
                    let v = if inside {
                        colors[c]
                    } else {
                        0.5 * ((tau * bi + phases[c]).sin() * (tau * bj).cos())
                    };
                    data.push(v as f32);
                }
            }
        }
    }
    Tensor::new(shape.dims().to_vec(), data)
}

/// A clip whose every pixel holds `color[c]` in channel `c`.
pub fn constant_video(shape: ClipShape, color: &[f32]) -> Result<Tensor<f32>> {
    shape.validate()?;
    if color.len() != shape.channels {
        return Err(Error::config(format!("{} colors for {} channels", color.len(), shape.channels)));
    }
    Ok(Tensor::from_fn(shape.dims().to_vec(), |i| color[i % shape.channels]))
}

/// Training data sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dataset {
    /// Moving squares with velocities drawn from `-max_speed..=max_speed`.
    Moving { square: usize, max_speed: i64 },
    /// Flat clips of one fixed color.
    Constant { color: Vec<f32> },
}

impl Default for Dataset {
    fn default() -> Self {
        Dataset::Moving {
            square: 4,
            max_speed: 1,
        }
    }
}

impl Dataset {
    /// Clip `index` of the stream keyed by `seed`.
    pub fn clip(&self, shape: ClipShape, seed: u64, index: u64) -> Result<Tensor<f32>> {
        let key = Stream::new(seed).child(index);
        match self {
            Dataset::Moving { square, max_speed } => {
                let span = (2 * max_speed + 1) as u64;
                let v = |c: u64| key.below(c, span) as i64 - max_speed;
                let motion = MotionSpec {
                    square: *square,
                    square_velocity: (v(0), v(1)),
                    pan_velocity: (v(2), v(3)),
                };
                gen_synthetic_video(shape, motion, key.bits(4))
            }
            Dataset::Constant { color } => constant_video(shape, color),
        }
    }

    /// `[B, T, H, W, C]` batch of clips `first..first + batch`.
    pub fn batch(&self, shape: ClipShape, seed: u64, first: u64, batch: usize) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(batch * shape.dims().iter().product::<usize>());
        for b in 0..batch as u64 {
            data.extend_from_slice(self.clip(shape, seed, first + b)?.data());
        }
        let mut dims = vec![batch];
        dims.extend(shape.dims());
        Tensor::new(dims, data)
    }
}
