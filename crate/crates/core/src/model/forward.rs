use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{LayerConfig, ModelConfig};
use super::embed::{patched_shape, patchify, position_embedding, timestep_embedding, unpatchify_index};
use super::params::{BoundParams, GateSlots, LayerSlots, ModelParams};
use crate::attention::{branch_attention, BranchVars, KeySets};
use crate::error::{Error, Result};
use crate::geometry::Grid;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Independent diffusion timestep index for each token-grid frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameTimesteps(Vec<usize>);

impl FrameTimesteps {
    pub fn new(steps: Vec<usize>, diffusion_steps: usize) -> Result<Self> {
        let ft = Self(steps);
        ft.check(diffusion_steps)?;
        Ok(ft)
    }

    pub fn constant(frames: usize, t: usize, diffusion_steps: usize) -> Result<Self> {
        Self::new(vec![t; frames], diffusion_steps)
    }

    pub fn check(&self, diffusion_steps: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t >= diffusion_steps) {
            Some(&t) => Err(Error::OutOfRange {
                what: "timestep",
                value: t,
                bound: diffusion_steps,
            }),
            None => Ok(()),
        }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-frame branch gates of one layer, each of shape `[B, T]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerGates {
    pub high: Var,
    pub low: Var,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub eps: Var,
    pub gates: Vec<LayerGates>,
}

/// Constant `[B·T, E]` timestep embeddings for a batch.
pub fn timestep_inputs<T: Scalar>(
    tape: &mut Tape<T>,
    ft: &[FrameTimesteps],
    embed_dim: usize,
) -> Var {
    let flat: Vec<usize> = ft.iter().flat_map(|f| f.as_slice().iter().copied()).collect();
    tape.constant(timestep_embedding(&flat, embed_dim))
}

/// Sigmoid gates from a two-layer MLP on the timestep embedding.
pub fn gate_forward<T: Scalar>(
    tape: &mut Tape<T>,
    temb: Var,
    slots: &GateSlots,
    bound: &BoundParams,
    batch: usize,
    frames: usize,
) -> Result<LayerGates> {
    let h = tape.matmul(temb, bound.var(slots.w1))?;
    let h = tape.add_bias(h, bound.var(slots.b1))?;
    let h = tape.silu(h)?;
    let logits = tape.matmul(h, bound.var(slots.w2))?;
    let logits = tape.add_bias(logits, bound.var(slots.b2))?;
    let g = tape.sigmoid(logits)?;
    let high = tape.slice_last(g, 0, 1)?;
    let high = tape.reshape(high, [batch, frames])?;
    let low = tape.slice_last(g, 1, 1)?;
    let low = tape.reshape(low, [batch, frames])?;
    Ok(LayerGates { high, low })
}

fn branch_vars(bound: &BoundParams, s: &super::params::BranchSlots) -> BranchVars {
    BranchVars {
        wq: bound.var(s.wq),
        wk: bound.var(s.wk),
        wv: bound.var(s.wv),
    }
}

/// Key sets for both branches of one layer on a token grid.
pub fn layer_key_sets(lc: &LayerConfig, grid: Grid, causal: bool) -> Result<(Arc<KeySets>, Arc<KeySets>)> {
    let high = KeySets::from_geometry(&lc.high_geometry(grid, causal)?)?;
    let low = KeySets::from_geometry(&lc.low_geometry(grid, causal)?)?;
    Ok((Arc::new(high), Arc::new(low)))
}

/// One MSC layer on `x[B, T, H, W, h]`:
///
/// ```text
/// n = LN(x)
/// y = x + Wo·[g_H ⊙ A_H(n[..h/2]) ‖ g_L ⊙ Up_r(A_L(Pool_r(n[h/2..])))] + bo
/// out = y + FFN(LN(y))
/// ```
#[allow(clippy::too_many_arguments)]
pub fn msc_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    temb: Var,
    lc: &LayerConfig,
    slots: &LayerSlots,
    bound: &BoundParams,
    keys: &(Arc<KeySets>, Arc<KeySets>),
) -> Result<(Var, LayerGates)> {
    let &[b, t, hh, ww, h] = tape.shape(x) else {
        return Err(Error::shape(format!("layer input must be [B, T, H, W, h], got {:?}", tape.shape(x))));
    };
    if h != lc.hidden {
        return Err(Error::shape(format!("layer expects width {}, got {h}", lc.hidden)));
    }
    let r = lc.down;
    if hh % r != 0 || ww % r != 0 {
        return Err(Error::config(format!("down factor {r} does not divide {hh}x{ww}")));
    }
    let half = lc.branch_width();
    let n = tape.layer_norm(x, bound.var(slots.norm1_gamma), bound.var(slots.norm1_beta))?;

    let xh = tape.slice_last(n, 0, half)?;
    let xh = tape.reshape(xh, [b, t * hh * ww, half])?;
    let ah = branch_attention(tape, xh, branch_vars(bound, &slots.high), lc.heads_high, &keys.0)?;
    let ah = tape.reshape(ah, [b, t, hh, ww, half])?;

    let xl = tape.slice_last(n, half, half)?;
    let pooled = tape.avg_pool2d(xl, r)?;
    let pooled = tape.reshape(pooled, [b, t * (hh / r) * (ww / r), half])?;
    let al = branch_attention(tape, pooled, branch_vars(bound, &slots.low), lc.heads_low, &keys.1)?;
    let al = tape.reshape(al, [b, t, hh / r, ww / r, half])?;
    let al = tape.upsample_nearest2d(al, r)?;

    let gates = gate_forward(tape, temb, &slots.gate, bound, b, t)?;
    let gh = tape.frame_scale(ah, gates.high)?;
    let gl = tape.frame_scale(al, gates.low)?;
    let cat = tape.concat_last(gh, gl)?;
    let proj = tape.matmul(cat, bound.var(slots.out_weight))?;
    let proj = tape.add_bias(proj, bound.var(slots.out_bias))?;
    let y = tape.add(x, proj)?;

    let n2 = tape.layer_norm(y, bound.var(slots.norm2_gamma), bound.var(slots.norm2_beta))?;
    let f = tape.matmul(n2, bound.var(slots.ffn_w1))?;
    let f = tape.add_bias(f, bound.var(slots.ffn_b1))?;
    let f = tape.gelu(f)?;
    let f = tape.matmul(f, bound.var(slots.ffn_w2))?;
    let f = tape.add_bias(f, bound.var(slots.ffn_b2))?;
    Ok((tape.add(y, f)?, gates))
}

/// Checks a `[B, T, H, W, C]` clip against the config and returns its token grid.
pub fn check_input(cfg: &ModelConfig, shape: &[usize], ft: &[FrameTimesteps]) -> Result<Grid> {
    let &[b, t, h, w, c] = shape else {
        return Err(Error::shape(format!("input must be [B, T, H, W, C], got {shape:?}")));
    };
    if h != cfg.grid.height || w != cfg.grid.width || c != cfg.in_channels {
        return Err(Error::shape(format!(
            "input {shape:?} does not match grid {}x{} with {} channels",
            cfg.grid.height, cfg.grid.width, cfg.in_channels
        )));
    }
    if t == 0 || t > cfg.grid.frames {
        return Err(Error::shape(format!(
            "input has {t} frames, model supports 1..={}",
            cfg.grid.frames
        )));
    }
    let grid = cfg.token_grid_for(t)?;
    if ft.len() != b {
        return Err(Error::shape(format!("{} timestep vectors for batch of {b}", ft.len())));
    }
    for f in ft {
        if f.len() != grid.frames {
            return Err(Error::shape(format!(
                "timestep vector of length {} for {} token frames",
                f.len(),
                grid.frames
            )));
        }
        f.check(cfg.diffusion_steps)?;
    }
    Ok(grid)
}

/// Predicts the noise in `x_noisy[B, T, H, W, C]`. Clips shorter than the
/// configured frame count are accepted; a prefix of frames gives the same
/// outputs as the full clip on those frames.
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    bound: &BoundParams,
    slots: &super::params::ModelSlots,
    x_noisy: &Tensor<T>,
    ft: &[FrameTimesteps],
) -> Result<Forward> {
    let grid = check_input(cfg, x_noisy.shape(), ft)?;
    let (p, q) = (cfg.patch.spatial, cfg.patch.temporal);
    let b = x_noisy.shape()[0];
    let tokens = patchify(x_noisy, p, q)?;
    let x = tape.constant(tokens);
    let x = tape.matmul(x, bound.var(slots.embed_weight))?;
    let x = tape.add_bias(x, bound.var(slots.embed_bias))?;
    let pos = position_embedding::<T>(grid, cfg.hidden);
    let reps = pos.data().len();
    let pos = Tensor::from_fn([b, grid.frames, grid.height, grid.width, cfg.hidden], |i| pos.data()[i % reps]);
    let pos = tape.constant(pos);
    let mut x = tape.add(x, pos)?;

    let temb = timestep_inputs(tape, ft, cfg.t_embed_dim);
    let mut gates = Vec::with_capacity(cfg.layers.len());
    for (lc, ls) in cfg.layers.iter().zip(&slots.layers) {
        let keys = layer_key_sets(lc, grid, cfg.causal)?;
        let (y, g) = msc_layer_forward(tape, x, temb, lc, ls, bound, &keys)?;
        x = y;
        gates.push(g);
    }

    let x = tape.layer_norm(x, bound.var(slots.final_gamma), bound.var(slots.final_beta))?;
    let x = tape.matmul(x, bound.var(slots.head_weight))?;
    let x = tape.add_bias(x, bound.var(slots.head_bias))?;
    debug_assert_eq!(tape.shape(x), patched_shape(x_noisy.shape(), p, q)?);
    let index: Arc<[usize]> = unpatchify_index(x_noisy.shape(), p, q)?.into();
    let eps = tape.gather(x, index, x_noisy.shape())?;
    Ok(Forward { eps, gates })
}

/// Gradient-free prediction.
pub fn predict<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    x_noisy: &Tensor<T>,
    ft: &[FrameTimesteps],
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = model_forward(&mut tape, cfg, &bound, params.slots(), x_noisy, ft)?;
    Ok(tape.value(out.eps).clone())
}

/// Gate values `(g_H, g_L)` of `layer` for one video's frame timesteps.
pub fn branch_gate<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    layer: usize,
    ft: &FrameTimesteps,
) -> Result<(Tensor<T>, Tensor<T>)> {
    ft.check(cfg.diffusion_steps)?;
    let slots = params.slots().layers.get(layer).ok_or(Error::OutOfRange {
        what: "layer",
        value: layer,
        bound: cfg.layers.len(),
    })?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let temb = timestep_inputs(&mut tape, std::slice::from_ref(ft), cfg.t_embed_dim);
    let g = gate_forward(&mut tape, temb, &slots.gate, &bound, 1, ft.len())?;
    let flat = |v: Var| tape.value(v).clone().reshape([ft.len()]);
    Ok((flat(g.high)?, flat(g.low)?))
}
