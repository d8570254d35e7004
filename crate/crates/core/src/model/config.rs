use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AttentionGeometry, Grid};

/// One MSC layer. The hidden width is split evenly between the two branches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub hidden: usize,
    pub heads_high: usize,
    pub heads_low: usize,
    /// High-res spatial window.
    pub window: usize,
    /// High-res temporal window, counting the query frame.
    pub frames: usize,
    /// Low-res spatial down factor.
    pub down: usize,
    /// Low-res temporal stride.
    pub stride: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

fn default_ffn_mult() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Patch {
    pub spatial: usize,
    pub temporal: usize,
}

impl Default for Patch {
    fn default() -> Self {
        Self {
            spatial: 1,
            temporal: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: Vec<LayerConfig>,
    /// Latent grid `(T, H, W)` before patchification.
    pub grid: Grid,
    pub in_channels: usize,
    #[serde(default)]
    pub patch: Patch,
    pub t_embed_dim: usize,
    pub gate_hidden: usize,
    pub diffusion_steps: usize,
    /// Disabling this drops frame causality from every branch; only useful as
    /// a negative control.
    #[serde(default = "default_true")]
    pub causal: bool,
}

impl LayerConfig {
    pub fn branch_width(&self) -> usize {
        self.hidden / 2
    }

    pub fn ffn_width(&self) -> usize {
        self.hidden * self.ffn_mult
    }

    pub fn validate(&self, token_grid: Grid) -> Result<()> {
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return Err(Error::config(format!("hidden width {} must be even and > 0", self.hidden)));
        }
        let half = self.branch_width();
        for (name, heads) in [("heads_high", self.heads_high), ("heads_low", self.heads_low)] {
            if heads == 0 || half % heads != 0 {
                return Err(Error::config(format!(
                    "{name} = {heads} does not divide branch width {half}"
                )));
            }
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("ffn_mult must be >= 1"));
        }
        AttentionGeometry::high_res(token_grid, self.window, self.frames)?;
        AttentionGeometry::low_res(token_grid.pooled(self.down)?, self.stride)?;
        Ok(())
    }

    pub fn high_geometry(&self, token_grid: Grid, causal: bool) -> Result<AttentionGeometry> {
        let g = AttentionGeometry::high_res(token_grid, self.window, self.frames)?;
        Ok(if causal { g } else { g.non_causal() })
    }

    pub fn low_geometry(&self, token_grid: Grid, causal: bool) -> Result<AttentionGeometry> {
        let g = AttentionGeometry::low_res(token_grid.pooled(self.down)?, self.stride)?;
        Ok(if causal { g } else { g.non_causal() })
    }
}

impl ModelConfig {
    /// Channels of one patchified token.
    pub fn patch_channels(&self) -> usize {
        self.in_channels * self.patch.spatial * self.patch.spatial * self.patch.temporal
    }

    /// Token grid for a latent clip with `frames` frames.
    pub fn token_grid_for(&self, frames: usize) -> Result<Grid> {
        let (p, q) = (self.patch.spatial, self.patch.temporal);
        if p == 0 || q == 0 {
            return Err(Error::config("patch sizes must be >= 1"));
        }
        let g = self.grid;
        if frames % q != 0 || g.height % p != 0 || g.width % p != 0 {
            return Err(Error::config(format!(
                "latent {frames}x{}x{} not divisible by patch (q={q}, p={p})",
                g.height, g.width
            )));
        }
        Ok(Grid::new(frames / q, g.height / p, g.width / p))
    }

    pub fn token_grid(&self) -> Result<Grid> {
        self.token_grid_for(self.grid.frames)
    }

    pub fn down_factors(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.down).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.token_grid()?;
        if grid.tokens() == 0 {
            return Err(Error::config("token grid is empty"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be >= 1"));
        }
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return Err(Error::config(format!("hidden width {} must be even and > 0", self.hidden)));
        }
        if self.t_embed_dim == 0 || self.t_embed_dim % 2 != 0 {
            return Err(Error::config("t_embed_dim must be even and > 0"));
        }
        if self.gate_hidden == 0 {
            return Err(Error::config("gate_hidden must be >= 1"));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::config("diffusion_steps must be >= 1"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.hidden != self.hidden {
                return Err(Error::config(format!(
                    "layer {i} hidden {} differs from model hidden {}",
                    layer.hidden, self.hidden
                )));
            }
            layer.validate(grid)?;
        }
        if self.layers.windows(2).any(|w| w[1].down < w[0].down) {
            return Err(Error::config(format!(
                "down factors must be non-decreasing with depth, got {:?}",
                self.down_factors()
            )));
        }
        Ok(())
    }

    /// Parses and validates a JSON config.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The desk-scale configuration: 8×16×16×4 latents, width 64, two layers
    /// with down factors 2 then 4.
    pub fn desk() -> Self {
        let downs = down_schedule(2, 2, 4, (16, 16)).expect("static schedule");
        Self {
            hidden: 64,
            layers: downs
                .into_iter()
                .map(|down| LayerConfig {
                    hidden: 64,
                    heads_high: 2,
                    heads_low: 2,
                    window: 3,
                    frames: 2,
                    down,
                    stride: 2,
                    ffn_mult: 4,
                })
                .collect(),
            grid: Grid::new(8, 16, 16),
            in_channels: 4,
            patch: Patch::default(),
            t_embed_dim: 32,
            gate_hidden: 32,
            diffusion_steps: 50,
            causal: true,
        }
    }

    /// A small configuration for exhaustive and finite-difference tests.
    pub fn tiny() -> Self {
        Self {
            hidden: 8,
            layers: [1, 2]
                .into_iter()
                .map(|down| LayerConfig {
                    hidden: 8,
                    heads_high: 2,
                    heads_low: 1,
                    window: 3,
                    frames: 2,
                    down,
                    stride: 2,
                    ffn_mult: 2,
                })
                .collect(),
            grid: Grid::new(3, 4, 4),
            in_channels: 2,
            patch: Patch::default(),
            t_embed_dim: 4,
            gate_hidden: 3,
            diffusion_steps: 10,
            causal: true,
        }
    }
}

/// Down factor for layer `depth` of `layers`: starts at `base`, doubles at
/// evenly spaced depths, and reaches `max` by the last layer when there are
/// enough layers.
pub fn r_schedule(depth: usize, layers: usize, base: usize, max: usize) -> Result<usize> {
    if !base.is_power_of_two() || !max.is_power_of_two() || base > max {
        return Err(Error::config(format!(
            "down factors must be powers of two with base <= max, got {base}, {max}"
        )));
    }
    if depth >= layers {
        return Err(Error::OutOfRange {
            what: "layer",
            value: depth,
            bound: layers,
        });
    }
    let doublings = (max / base).trailing_zeros() as usize;
    Ok(base << (depth * (doublings + 1) / layers))
}

/// The full schedule, checked against the token grid's spatial extents.
pub fn down_schedule(layers: usize, base: usize, max: usize, extents: (usize, usize)) -> Result<Vec<usize>> {
    if max > extents.0 || max > extents.1 || extents.0 % max != 0 || extents.1 % max != 0 {
        return Err(Error::config(format!(
            "down factor {max} leaves no whole pooled cells on a {}x{} grid",
            extents.0, extents.1
        )));
    }
    (0..layers).map(|l| r_schedule(l, layers, base, max)).collect()
}
