//! Which (query, key) token pairs each attention branch may use.
//!
//! Tokens live on a `(T, H, W)` grid and are flattened frame-major:
//! `flat = t·H·W + i·W + j`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mask;

/// Largest dense mask side materialized by default.
pub const DEFAULT_MASK_CAP: usize = 65536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
        }
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    /// Rejects empty grids and grids whose token count overflows.
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config(format!(
                "grid {}x{}x{} has an empty axis",
                self.frames, self.height, self.width
            )));
        }
        self.frames
            .checked_mul(self.height)
            .and_then(|n| n.checked_mul(self.width))
            .map(|_| ())
            .ok_or_else(|| Error::config("grid token count overflows"))
    }

    pub fn frame_tokens(&self) -> usize {
        self.height * self.width
    }

    /// The grid after `r×r` spatial average pooling.
    pub fn pooled(&self, r: usize) -> Result<Grid> {
        if r == 0 || self.height % r != 0 || self.width % r != 0 {
            return Err(Error::config(format!(
                "down factor {r} does not divide {}x{}",
                self.height, self.width
            )));
        }
        Ok(Grid::new(self.frames, self.height / r, self.width / r))
    }

    pub fn flat(&self, c: TokenCoord) -> Result<usize> {
        self.check(c)?;
        Ok((c.t * self.height + c.i) * self.width + c.j)
    }

    pub fn coord(&self, flat: usize) -> Result<TokenCoord> {
        if flat >= self.tokens() {
            return Err(Error::OutOfRange {
                what: "token index",
                value: flat,
                bound: self.tokens(),
            });
        }
        let per = self.frame_tokens();
        Ok(TokenCoord {
            t: flat / per,
            i: (flat % per) / self.width,
            j: flat % self.width,
        })
    }

    fn check(&self, c: TokenCoord) -> Result<()> {
        for (what, value, bound) in [
            ("frame", c.t, self.frames),
            ("row", c.i, self.height),
            ("col", c.j, self.width),
        ] {
            if value >= bound {
                return Err(Error::OutOfRange { what, value, bound });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenCoord {
    pub t: usize,
    pub i: usize,
    pub j: usize,
}

impl TokenCoord {
    pub fn new(t: usize, i: usize, j: usize) -> Self {
        Self { t, i, j }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "branch", rename_all = "snake_case")]
pub enum BranchKind {
    /// Clamped `window×window` spatial neighborhood over the last `frames` frames.
    HighRes { window: usize, frames: usize },
    /// Whole frame, every `stride`-th earlier frame counted back from the query.
    LowRes { stride: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionGeometry {
    pub grid: Grid,
    pub kind: BranchKind,
    pub causal: bool,
}

/// Start and length of a sliding window of size `w` around `pos`, shifted to
/// stay inside `[0, extent)`.
fn clamped_window(pos: usize, extent: usize, w: usize) -> (usize, usize) {
    if extent <= w {
        return (0, extent);
    }
    let start = pos.saturating_sub((w - 1) / 2).min(extent - w);
    (start, w)
}

impl AttentionGeometry {
    pub fn high_res(grid: Grid, window: usize, frames: usize) -> Result<Self> {
        if window == 0 || frames == 0 {
            return Err(Error::config(format!(
                "high-res windows must be >= 1 (window {window}, frames {frames})"
            )));
        }
        Ok(Self {
            grid,
            kind: BranchKind::HighRes { window, frames },
            causal: true,
        })
    }

    pub fn low_res(grid: Grid, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("low-res stride must be >= 1"));
        }
        Ok(Self {
            grid,
            kind: BranchKind::LowRes { stride },
            causal: true,
        })
    }

    /// Parses and validates a geometry, e.g. from a config file.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let g: Self = serde_json::from_slice(bytes)?;
        g.grid.validate()?;
        match g.kind {
            BranchKind::HighRes { window, frames } => Self::high_res(g.grid, window, frames)?,
            BranchKind::LowRes { stride } => Self::low_res(g.grid, stride)?,
        };
        Ok(g)
    }

    /// The same geometry with the frame-causality constraint dropped; the
    /// temporal window becomes symmetric around the query frame.
    pub fn non_causal(mut self) -> Self {
        self.causal = false;
        self
    }

    pub fn tokens(&self) -> usize {
        self.grid.tokens()
    }

    fn frame_allowed(&self, qt: usize, kt: usize) -> bool {
        if self.causal && kt > qt {
            return false;
        }
        let gap = qt.abs_diff(kt);
        match self.kind {
            BranchKind::HighRes { frames, .. } => gap < frames,
            BranchKind::LowRes { stride } => gap % stride == 0,
        }
    }

    pub fn allowed(&self, q: TokenCoord, k: TokenCoord) -> Result<bool> {
        self.grid.check(q)?;
        self.grid.check(k)?;
        if !self.frame_allowed(q.t, k.t) {
            return Ok(false);
        }
        Ok(match self.kind {
            BranchKind::HighRes { window, .. } => {
                let (r0, rn) = clamped_window(q.i, self.grid.height, window);
                let (c0, cn) = clamped_window(q.j, self.grid.width, window);
                (r0..r0 + rn).contains(&k.i) && (c0..c0 + cn).contains(&k.j)
            }
            BranchKind::LowRes { .. } => true,
        })
    }

    /// Frames any query in `q_frame` may attend to.
    pub fn frame_reach(&self, q_frame: usize) -> Result<BTreeSet<usize>> {
        if q_frame >= self.grid.frames {
            return Err(Error::OutOfRange {
                what: "frame",
                value: q_frame,
                bound: self.grid.frames,
            });
        }
        Ok((0..self.grid.frames)
            .filter(|&kt| self.frame_allowed(q_frame, kt))
            .collect())
    }

    /// Flat indices of the keys of query `q`, ascending, enumerated from the
    /// window bounds rather than by scanning the grid.
    pub fn keys_for(&self, q: TokenCoord) -> Result<Vec<usize>> {
        self.grid.check(q)?;
        let g = self.grid;
        let frames = self.frame_reach(q.t)?;
        let ((r0, rn), (c0, cn)) = match self.kind {
            BranchKind::HighRes { window, .. } => (
                clamped_window(q.i, g.height, window),
                clamped_window(q.j, g.width, window),
            ),
            BranchKind::LowRes { .. } => ((0, g.height), (0, g.width)),
        };
        let mut keys = Vec::with_capacity(frames.len() * rn * cn);
        for t in frames {
            for i in r0..r0 + rn {
                let row = (t * g.height + i) * g.width;
                keys.extend(row + c0..row + c0 + cn);
            }
        }
        Ok(keys)
    }

    pub fn build_dense_mask(&self) -> Result<Mask> {
        self.build_dense_mask_capped(DEFAULT_MASK_CAP)
    }

    pub fn build_dense_mask_capped(&self, cap: usize) -> Result<Mask> {
        let s = self.tokens();
        if s > cap {
            return Err(Error::MaskTooLarge { side: s, cap });
        }
        let mut data = Vec::with_capacity(s * s);
        for qf in 0..s {
            let q = self.grid.coord(qf)?;
            for kf in 0..s {
                data.push(self.allowed(q, self.grid.coord(kf)?)?);
            }
        }
        Mask::new([s, s], data)
    }

    /// Number of allowed pairs, by enumerating every query's key window.
    pub fn pair_count(&self) -> u64 {
        (0..self.tokens())
            .map(|qf| {
                let q = self.grid.coord(qf).expect("in range");
                self.keys_for(q).expect("in range").len() as u64
            })
            .sum()
    }

    /// Closed-form upper bound on [`pair_count`](Self::pair_count):
    /// `S·w²·v` for high-res, `S·⌈T/d⌉·H·W` for low-res.
    pub fn pair_bound(&self) -> u64 {
        let s = self.tokens() as u64;
        match self.kind {
            BranchKind::HighRes { window, frames } => {
                let causal_frames = if self.causal { frames } else { 2 * frames - 1 };
                s * (window * window * causal_frames) as u64
            }
            BranchKind::LowRes { stride } => {
                let t = self.grid.frames as u64;
                let reach = if self.causal {
                    t.div_ceil(stride as u64)
                } else {
                    t
                };
                s * reach * self.grid.frame_tokens() as u64
            }
        }
    }
}
