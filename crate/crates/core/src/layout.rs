//! Patch-grouped token ordering.
//!
//! A latent video of `T x H x W` tokens is flattened so every `P x P`
//! spatial patch of one frame occupies a contiguous run of `P^2` positions.
//! Frames stay outermost and in their original order; patches are visited
//! row-major, and tokens inside a patch are row-major as well.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub t_frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl TokenGrid {
    pub fn new(t_frames: usize, height: usize, width: usize, patch: usize) -> Result<Self> {
        let grid = Self {
            t_frames,
            height,
            width,
            patch,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_frames == 0 || self.height == 0 || self.width == 0 || self.patch == 0 {
            bail!(Geometry, "grid extents must be positive: {:?}", self);
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            bail!(
                Geometry,
                "height {} and width {} must be divisible by patch {}",
                self.height,
                self.width,
                self.patch
            );
        }
        Ok(())
    }

    /// Sequence length `S = T * H * W`.
    pub fn seq_len(&self) -> usize {
        self.t_frames * self.height * self.width
    }

    /// Tokens per block, `N = P^2`.
    pub fn block_size(&self) -> usize {
        self.patch * self.patch
    }

    /// Block grid extents `(T, H / P, W / P)`.
    pub fn block_dims(&self) -> (usize, usize, usize) {
        (self.t_frames, self.height / self.patch, self.width / self.patch)
    }

    pub fn num_blocks(&self) -> usize {
        let (t, h, w) = self.block_dims();
        t * h * w
    }

    /// Raster index of token `(frame, row, col)`.
    pub fn raster_index(&self, frame: usize, row: usize, col: usize) -> usize {
        (frame * self.height + row) * self.width + col
    }

    /// Inverse of [`raster_index`](Self::raster_index).
    pub fn raster_coords(&self, index: usize) -> (usize, usize, usize) {
        let col = index % self.width;
        let row = (index / self.width) % self.height;
        (index / (self.width * self.height), row, col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    /// `forward[i]` is the raster index of the token at reordered position `i`.
    pub forward: Vec<usize>,
    /// `inverse[forward[i]] == i`.
    pub inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        let forward: Vec<usize> = (0..len).collect();
        Self {
            inverse: forward.clone(),
            forward,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    fn indices(&self, direction: Direction) -> &[usize] {
        match direction {
            Direction::Forward => &self.forward,
            Direction::Inverse => &self.inverse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Raster order to block order.
    Forward,
    /// Block order back to raster order.
    Inverse,
}

pub fn build_permutation(grid: &TokenGrid) -> Result<Permutation> {
    grid.validate()?;
    let p = grid.patch;
    let (frames, patch_rows, patch_cols) = grid.block_dims();
    let mut forward = Vec::with_capacity(grid.seq_len());
    for t in 0..frames {
        for pr in 0..patch_rows {
            for pc in 0..patch_cols {
                for r in 0..p {
                    for c in 0..p {
                        forward.push(grid.raster_index(t, pr * p + r, pc * p + c));
                    }
                }
            }
        }
    }
    let mut inverse = vec![0; forward.len()];
    for (i, &src) in forward.iter().enumerate() {
        inverse[src] = i;
    }
    Ok(Permutation { forward, inverse })
}

/// Shared, lazily built permutation for `grid`.
pub fn cached_permutation(grid: &TokenGrid) -> Result<Arc<Permutation>> {
    static CACHE: OnceLock<Mutex<HashMap<TokenGrid, Arc<Permutation>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(p) = cache.lock().unwrap().get(grid) {
        return Ok(Arc::clone(p));
    }
    let perm = Arc::new(build_permutation(grid)?);
    cache
        .lock()
        .unwrap()
        .entry(*grid)
        .or_insert_with(|| Arc::clone(&perm));
    Ok(perm)
}

/// Token axis convention: the only axis of a vector, otherwise the
/// second-to-last axis (`[S, C]`, `[h, S, D]`, `[b, h, S, D]`).
pub fn token_axis(rank: usize) -> usize {
    if rank <= 1 {
        0
    } else {
        rank - 2
    }
}

pub fn apply_reorder(x: &Tensor, p: &Permutation, direction: Direction) -> Result<Tensor> {
    apply_reorder_axis(x, token_axis(x.rank()), p, direction)
}

/// Gathers along `axis`: output token `i` is input token `idx[i]` where `idx`
/// is the forward or inverse table.
pub fn apply_reorder_axis(x: &Tensor, axis: usize, p: &Permutation, direction: Direction) -> Result<Tensor> {
    if axis >= x.rank() {
        bail!(Geometry, "axis {} out of range for rank {}", axis, x.rank());
    }
    let shape = x.shape();
    if shape[axis] != p.len() {
        bail!(
            Geometry,
            "token axis has length {} but permutation has length {}",
            shape[axis],
            p.len()
        );
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = p.len();
    let idx = p.indices(direction);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        let base = o * len * inner;
        for &j in idx {
            let from = base + j * inner;
            out.extend_from_slice(&src[from..from + inner]);
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Gathers rows of a row-major `[len, width]` buffer.
pub(crate) fn gather_rows(src: &[f32], width: usize, idx: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &j in idx {
        out.extend_from_slice(&src[j * width..(j + 1) * width]);
    }
    out
}
