//! Multi-scale causal attention for autoregressive video diffusion.
//!
//! The crate is organized bottom-up: [`tensor`] supplies arrays and a
//! reverse-mode tape, [`geometry`] decides which token pairs each branch may
//! use, [`attention`] evaluates masked attention under a geometry, [`model`]
//! stacks two-branch layers into a denoiser, [`diffusion`] holds the
//! per-frame noise process and the autoregressive sampler, and [`cost`]
//! compares closed-form FLOP counts with enumerated ones.

pub mod attention;
pub mod audit;
pub mod cost;
pub mod diffusion;
pub mod error;
#[doc(hidden)]
pub mod fuzzing;
pub mod geometry;
pub mod io;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
