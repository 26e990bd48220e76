//! Block masks over `(query block, key block)` pairs.
//!
//! A [`BlockMask`] stores one square bit matrix per head. Bits are packed
//! row-major, least significant bit first, with each row padded to a whole
//! byte; this is also the payload layout of the `.nmsk` file format.

mod format;
mod nabla;
mod sta;

pub use format::{decode_mask, encode_mask, encode_pgm, export_mask_image, load_mask, save_mask};
pub use nabla::{
    cdf_threshold_row, nabla_mask, nabla_mask_cost, reduced_attention, NablaParams, ReducedAttention,
};
pub use sta::{count_dense_blocks_eq5, sta_mask, StaWindow};

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockMask {
    heads: usize,
    size: usize,
    stride: usize,
    bits: Vec<u8>,
}

impl BlockMask {
    /// All-false mask with `heads` square `size x size` matrices.
    pub fn empty(heads: usize, size: usize) -> Result<Self> {
        if heads == 0 || size == 0 {
            bail!(
                Geometry,
                "mask needs at least one head and one block, got {heads}x{size}"
            );
        }
        let stride = size.div_ceil(8);
        Ok(Self {
            heads,
            size,
            stride,
            bits: vec![0; heads * size * stride],
        })
    }

    pub fn full(heads: usize, size: usize) -> Result<Self> {
        Self::from_fn(heads, size, |_, _, _| true)
    }

    /// Each block attends only to itself.
    pub fn identity(heads: usize, size: usize) -> Result<Self> {
        Self::from_fn(heads, size, |_, r, c| r == c)
    }

    pub fn from_fn(
        heads: usize,
        size: usize,
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        let mut m = Self::empty(heads, size)?;
        for h in 0..heads {
            for r in 0..size {
                for c in 0..size {
                    if f(h, r, c) {
                        m.set(h, r, c, true);
                    }
                }
            }
        }
        Ok(m)
    }

    pub(crate) fn from_raw(heads: usize, size: usize, bits: Vec<u8>) -> Result<Self> {
        let mut m = Self::empty(heads, size)?;
        if bits.len() != m.bits.len() {
            bail!(
                Geometry,
                "expected {} packed bytes, got {}",
                m.bits.len(),
                bits.len()
            );
        }
        m.bits = bits;
        Ok(m)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn rows(&self) -> usize {
        self.size
    }

    pub fn cols(&self) -> usize {
        self.size
    }

    /// Bytes per packed row.
    pub fn row_stride(&self) -> usize {
        self.stride
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    fn offset(&self, h: usize, r: usize) -> usize {
        (h * self.size + r) * self.stride
    }

    #[inline]
    pub fn get(&self, h: usize, r: usize, c: usize) -> bool {
        debug_assert!(h < self.heads && r < self.size && c < self.size);
        self.bits[self.offset(h, r) + c / 8] >> (c % 8) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, h: usize, r: usize, c: usize, on: bool) {
        let at = self.offset(h, r) + c / 8;
        let byte = &mut self.bits[at];
        if on {
            *byte |= 1 << (c % 8);
        } else {
            *byte &= !(1 << (c % 8));
        }
    }

    pub fn row_bytes(&self, h: usize, r: usize) -> &[u8] {
        let o = self.offset(h, r);
        &self.bits[o..o + self.stride]
    }

    /// Column indices of the true bits in row `r` of head `h`, ascending.
    pub fn active_cols(&self, h: usize, r: usize) -> Vec<usize> {
        (0..self.size).filter(|&c| self.get(h, r, c)).collect()
    }

    pub fn popcount(&self) -> u64 {
        self.bits.iter().map(|b| b.count_ones() as u64).sum()
    }

    pub fn head_popcount(&self, h: usize) -> u64 {
        let o = self.offset(h, 0);
        self.bits[o..o + self.size * self.stride]
            .iter()
            .map(|b| b.count_ones() as u64)
            .sum()
    }

    pub fn row_popcount(&self, h: usize, r: usize) -> u64 {
        self.row_bytes(h, r).iter().map(|b| b.count_ones() as u64).sum()
    }

    pub fn total_bits(&self) -> u64 {
        (self.heads * self.size * self.size) as u64
    }

    pub fn is_full(&self) -> bool {
        self.popcount() == self.total_bits()
    }

    /// Mask head used by attention head `head`; single-head masks broadcast.
    pub fn head_for(&self, head: usize) -> usize {
        if self.heads == 1 {
            0
        } else {
            head
        }
    }

    /// Checks this mask can drive attention with `heads` heads over
    /// `blocks` sequence blocks.
    pub fn check_compatible(&self, heads: usize, blocks: usize) -> Result<()> {
        if self.size != blocks {
            bail!(
                Geometry,
                "mask covers {} blocks, sequence has {}",
                self.size,
                blocks
            );
        }
        if self.heads != 1 && self.heads != heads {
            bail!(Geometry, "mask has {} heads, attention has {}", self.heads, heads);
        }
        Ok(())
    }

    /// True when every bit set here is also set in `other`. A single-head
    /// mask on either side is broadcast as in [`join_masks`]; other head
    /// count mismatches are never subsets.
    pub fn is_subset_of(&self, other: &BlockMask) -> bool {
        if self.size != other.size || (self.heads != other.heads && self.heads != 1 && other.heads != 1) {
            return false;
        }
        let per_head = self.size * self.stride;
        (0..self.heads.max(other.heads)).all(|h| {
            let a = &self.bits[self.head_for(h) * per_head..][..per_head];
            let b = &other.bits[other.head_for(h) * per_head..][..per_head];
            a.iter().zip(b).all(|(x, y)| x & !y == 0)
        })
    }
}

/// Elementwise OR. Head counts must match unless one side has a single
/// head, which is broadcast.
pub fn join_masks(a: &BlockMask, b: &BlockMask) -> Result<BlockMask> {
    if a.size != b.size {
        bail!(
            Geometry,
            "cannot join {}x{} with {}x{} masks",
            a.size,
            a.size,
            b.size,
            b.size
        );
    }
    let heads = match (a.heads, b.heads) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        (x, y) => bail!(Geometry, "cannot join masks with {x} and {y} heads"),
    };
    let mut out = BlockMask::empty(heads, a.size)?;
    let per_head = a.size * a.stride;
    for h in 0..heads {
        let ah = a.head_for(h) * per_head;
        let bh = b.head_for(h) * per_head;
        let dst = &mut out.bits[h * per_head..(h + 1) * per_head];
        for (i, byte) in dst.iter_mut().enumerate() {
            *byte = a.bits[ah + i] | b.bits[bh + i];
        }
    }
    Ok(out)
}

/// Fraction of false bits: `1 - popcount / (heads * rows * cols)`.
pub fn sparsity(m: &BlockMask) -> f64 {
    1.0 - m.popcount() as f64 / m.total_bits() as f64
}
