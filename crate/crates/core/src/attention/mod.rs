//! Scaled dot-product attention over `[h, S, D]` tensors.
//!
//! Three forward routes share one contract:
//!
//! - [`dense_attention`]: softmax over every key.
//! - [`masked_dense_attention`]: the same two-pass softmax with keys in
//!   masked blocks excluded from the max and the normaliser, i.e. a score
//!   of `-inf`.
//! - [`block_sparse_attention`]: visits only the `(query block, key block)`
//!   tiles whose mask bit is set, keeping a running max and running sum per
//!   query row so skipped tiles are never touched.
//!
//! Scores, softmax statistics and accumulators are held in f64; outputs are
//! rounded to f32 once at the end.

mod backward;
mod dense;
mod sparse;

pub use backward::attention_backward;

use crate::error::{bail, Result};
use crate::masks::BlockMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub scale: f64,
}

impl AttentionInputs {
    /// Inputs with the default `1 / sqrt(D)` scale.
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let d = *q.shape().last().unwrap_or(&1);
        Self::with_scale(q, k, v, 1.0 / (d as f64).sqrt())
    }

    pub fn with_scale(q: Tensor, k: Tensor, v: Tensor, scale: f64) -> Result<Self> {
        let inp = Self { q, k, v, scale };
        inp.validate()?;
        Ok(inp)
    }

    /// `(heads, seq, dim)`; accepts `[h, S, D]` or single-head `[S, D]`.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let shape = self.q.shape();
        if self.k.shape() != shape || self.v.shape() != shape {
            bail!(
                Geometry,
                "q {:?}, k {:?} and v {:?} must share a shape",
                shape,
                self.k.shape(),
                self.v.shape()
            );
        }
        match *shape {
            [s, d] => Ok((1, s, d)),
            [h, s, d] => Ok((h, s, d)),
            _ => bail!(Geometry, "attention expects [h, S, D] or [S, D], got {:?}", shape),
        }
    }

    pub fn validate(&self) -> Result<(usize, usize, usize)> {
        let dims = self.dims()?;
        if !(self.scale.is_finite() && self.scale > 0.0) {
            bail!(
                Param,
                "attention scale must be positive and finite, got {}",
                self.scale
            );
        }
        self.q.check_finite()?;
        self.k.check_finite()?;
        self.v.check_finite()?;
        Ok(dims)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrad {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
}

/// Multiply-accumulate counts of one attention evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCount {
    /// `q . k` products.
    pub score_macs: u64,
    /// `p * v` products.
    pub value_macs: u64,
    /// Mask generation (pooling and the reduced score map).
    pub mask_macs: u64,
}

impl FlopCount {
    pub fn dense(heads: usize, seq: usize, dim: usize) -> Self {
        let n = (heads * seq * seq * dim) as u64;
        Self {
            score_macs: n,
            value_macs: n,
            mask_macs: 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.score_macs + self.value_macs + self.mask_macs
    }
}

impl std::ops::Add for FlopCount {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            score_macs: self.score_macs + o.score_macs,
            value_macs: self.value_macs + o.value_macs,
            mask_macs: self.mask_macs + o.mask_macs,
        }
    }
}

impl std::ops::AddAssign for FlopCount {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for FlopCount {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

pub fn dense_attention(inp: &AttentionInputs) -> Result<Tensor> {
    let (h, s, d) = inp.validate()?;
    let out = dense::forward(inp, h, s, d, None);
    Tensor::new(inp.q.shape().to_vec(), out)
}

pub fn masked_dense_attention(inp: &AttentionInputs, m: &BlockMask, block_n: usize) -> Result<Tensor> {
    let (h, s, d) = inp.validate()?;
    check_mask(m, h, s, block_n)?;
    let out = dense::forward(inp, h, s, d, Some((m, block_n)));
    Tensor::new(inp.q.shape().to_vec(), out)
}

pub fn block_sparse_attention(inp: &AttentionInputs, m: &BlockMask, block_n: usize) -> Result<Tensor> {
    block_sparse_attention_counted(inp, m, block_n).map(|(t, _)| t)
}

/// [`block_sparse_attention`] plus the multiply-accumulates it performed.
pub fn block_sparse_attention_counted(
    inp: &AttentionInputs,
    m: &BlockMask,
    block_n: usize,
) -> Result<(Tensor, FlopCount)> {
    let (h, s, d) = inp.validate()?;
    check_mask(m, h, s, block_n)?;
    let (out, flops) = sparse::forward(inp, h, s, d, m, block_n);
    Ok((Tensor::new(inp.q.shape().to_vec(), out)?, flops))
}

pub(crate) fn check_mask(m: &BlockMask, heads: usize, seq: usize, block_n: usize) -> Result<()> {
    if block_n == 0 || seq % block_n != 0 {
        bail!(
            Geometry,
            "sequence length {} is not a multiple of block size {}",
            seq,
            block_n
        );
    }
    m.check_compatible(heads, seq / block_n)?;
    for mh in 0..m.heads() {
        for r in 0..m.rows() {
            if m.row_popcount(mh, r) == 0 {
                bail!(Validation, "mask head {} row {} attends to no block", mh, r);
            }
        }
    }
    Ok(())
}

/// Ascending key-index ranges visible to query block `qb` of head `head`.
pub(crate) fn key_ranges(
    mask: Option<(&BlockMask, usize)>,
    head: usize,
    qb: usize,
    seq: usize,
) -> Vec<std::ops::Range<usize>> {
    match mask {
        None => std::iter::once(0..seq).collect(),
        Some((m, n)) => {
            let mh = m.head_for(head);
            m.active_cols(mh, qb)
                .into_iter()
                .map(|c| c * n..(c + 1) * n)
                .collect()
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}
