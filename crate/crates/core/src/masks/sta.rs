//! Sliding-tile masks on the patch block grid.
//!
//! Tiles coincide with sequence blocks: one frame deep and `P x P` tokens
//! wide, so the tile grid is `(T, H / P, W / P)`. Each query tile attends to
//! a `w_t x w_h x w_w` window of key tiles, nominally centred on itself and
//! shifted inwards at the grid boundary so every window has full volume.

use std::ops::Range;

use super::BlockMask;
use crate::error::{bail, Result};
use crate::layout::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StaWindow {
    pub w_t: usize,
    pub w_h: usize,
    pub w_w: usize,
    pub grid: TokenGrid,
}

impl StaWindow {
    pub fn new(w_t: usize, w_h: usize, w_w: usize, grid: TokenGrid) -> Result<Self> {
        let w = Self { w_t, w_h, w_w, grid };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let (tb, hb, wb) = self.grid.block_dims();
        for (name, w, n) in [
            ("w_t", self.w_t, tb),
            ("w_h", self.w_h, hb),
            ("w_w", self.w_w, wb),
        ] {
            if w % 2 == 0 {
                bail!(Param, "{name} = {w} must be odd and positive");
            }
            if w > n {
                bail!(Param, "{name} = {w} exceeds the {n} blocks on that axis");
            }
        }
        Ok(())
    }

    pub fn volume(&self) -> usize {
        self.w_t * self.w_h * self.w_w
    }
}

/// Window covering `width` positions around `center` on an axis of `len`.
fn clamped(center: usize, width: usize, len: usize) -> Range<usize> {
    let start = center.saturating_sub(width / 2).min(len - width);
    start..start + width
}

pub fn sta_mask(window: &StaWindow) -> Result<BlockMask> {
    window.validate()?;
    let (tb, hb, wb) = window.grid.block_dims();
    let mut mask = BlockMask::empty(1, tb * hb * wb)?;
    let block = |t: usize, i: usize, j: usize| (t * hb + i) * wb + j;
    for t in 0..tb {
        let rt = clamped(t, window.w_t, tb);
        for i in 0..hb {
            let ri = clamped(i, window.w_h, hb);
            for j in 0..wb {
                let rj = clamped(j, window.w_w, wb);
                let q = block(t, i, j);
                for kt in rt.clone() {
                    for ki in ri.clone() {
                        for kj in rj.clone() {
                            mask.set(0, q, block(kt, ki, kj), true);
                        }
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Dense block count `(w_t w_h w_w) * (T * H/P * W/P)` with tiles equal to
/// blocks.
pub fn count_dense_blocks_eq5(window: &StaWindow) -> Result<u64> {
    window.validate()?;
    Ok(window.volume() as u64 * window.grid.num_blocks() as u64)
}
