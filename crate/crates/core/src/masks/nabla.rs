//! Adaptive block mask from a downsampled attention map.
//!
//! Per head: mean-pool queries and keys over each run of `N` tokens, take
//! the softmax of the pooled score matrix, then in every row keep the
//! smallest set of largest-probability blocks whose cumulative mass reaches
//! `thr`. Rows are sorted ascending (ties by column index), summed
//! sequentially, and a column is kept when its running sum is `>= 1 - thr`.
//!
//! Pooling, scores and the cumulative sum are evaluated in f64.

use rayon::prelude::*;

use super::BlockMask;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NablaParams {
    /// Probability mass each row must retain, in `[0, 1]`.
    pub thr: f64,
    /// Tokens per block.
    pub block_n: usize,
    /// Score scale, normally `1 / sqrt(D)`.
    pub scale: f64,
}

impl NablaParams {
    pub fn new(thr: f64, block_n: usize, head_dim: usize) -> Result<Self> {
        if head_dim == 0 {
            bail!(Param, "head dimension must be positive");
        }
        let p = Self {
            thr,
            block_n,
            scale: 1.0 / (head_dim as f64).sqrt(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.thr) {
            bail!(Param, "thr must lie in [0, 1], got {}", self.thr);
        }
        if self.block_n == 0 {
            bail!(Param, "block size must be positive");
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            bail!(Param, "scale must be positive and finite, got {}", self.scale);
        }
        Ok(())
    }
}

/// Row-stochastic `blocks x blocks` map per head.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedAttention {
    pub heads: usize,
    pub blocks: usize,
    pub probs: Vec<f64>,
}

impl ReducedAttention {
    pub fn row(&self, h: usize, r: usize) -> &[f64] {
        let o = (h * self.blocks + r) * self.blocks;
        &self.probs[o..o + self.blocks]
    }
}

/// `(heads, seq, dim)` of a `[h, S, D]` or `[S, D]` tensor.
pub(crate) fn head_layout(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [s, d] => Ok((1, s, d)),
        [h, s, d] => Ok((h, s, d)),
        _ => bail!(Geometry, "expected [h, S, D] or [S, D], got {:?}", t.shape()),
    }
}

fn check_pair(q: &Tensor, k: &Tensor, block_n: usize) -> Result<(usize, usize, usize)> {
    if q.shape() != k.shape() {
        bail!(
            Geometry,
            "q {:?} and k {:?} differ in shape",
            q.shape(),
            k.shape()
        );
    }
    let (h, s, d) = head_layout(q)?;
    if block_n == 0 {
        bail!(Param, "block size must be positive");
    }
    if s % block_n != 0 {
        bail!(
            Geometry,
            "sequence length {} is not divisible by block size {}",
            s,
            block_n
        );
    }
    Ok((h, s, d))
}

fn block_means(x: &[f32], seq: usize, dim: usize, block_n: usize) -> Vec<f64> {
    let blocks = seq / block_n;
    let mut out = vec![0.0f64; blocks * dim];
    for b in 0..blocks {
        let acc = &mut out[b * dim..(b + 1) * dim];
        for t in b * block_n..(b + 1) * block_n {
            for (a, &v) in acc.iter_mut().zip(&x[t * dim..(t + 1) * dim]) {
                *a += v as f64;
            }
        }
        for a in acc.iter_mut() {
            *a /= block_n as f64;
        }
    }
    out
}

fn reduced_head(q: &[f32], k: &[f32], seq: usize, dim: usize, block_n: usize, scale: f64) -> Vec<f64> {
    let blocks = seq / block_n;
    let qa = block_means(q, seq, dim, block_n);
    let ka = block_means(k, seq, dim, block_n);
    let mut probs = vec![0.0f64; blocks * blocks];
    for (r, row) in probs.chunks_exact_mut(blocks).enumerate() {
        let qr = &qa[r * dim..(r + 1) * dim];
        for (c, p) in row.iter_mut().enumerate() {
            let kc = &ka[c * dim..(c + 1) * dim];
            *p = scale * qr.iter().zip(kc).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for p in row.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
    probs
}

/// Softmax of pooled scores, the map the CDF threshold is applied to.
pub fn reduced_attention(q: &Tensor, k: &Tensor, block_n: usize, scale: f64) -> Result<ReducedAttention> {
    let (h, s, d) = check_pair(q, k, block_n)?;
    let blocks = s / block_n;
    let per_head: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|head| {
            let range = head * s * d..(head + 1) * s * d;
            reduced_head(&q.data()[range.clone()], &k.data()[range], s, d, block_n, scale)
        })
        .collect();
    Ok(ReducedAttention {
        heads: h,
        blocks,
        probs: per_head.concat(),
    })
}

/// Binarises one probability row: sort ascending (ties by column), take the
/// running sum with its final value pinned to 1, keep entries `>= 1 - thr`,
/// and scatter back to column order.
pub fn cdf_threshold_row(row: &[f64], thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let cutoff = 1.0 - thr;
    let mut keep = vec![false; row.len()];
    let mut cum = 0.0f64;
    for (rank, &col) in order.iter().enumerate() {
        cum += row[col];
        let c = if rank + 1 == order.len() { 1.0 } else { cum };
        keep[col] = c >= cutoff;
    }
    keep
}

pub fn nabla_mask(q: &Tensor, k: &Tensor, params: &NablaParams) -> Result<BlockMask> {
    params.validate()?;
    let reduced = reduced_attention(q, k, params.block_n, params.scale)?;
    let (heads, blocks) = (reduced.heads, reduced.blocks);
    let mut mask = BlockMask::empty(heads, blocks)?;
    let rows: Vec<Vec<bool>> = (0..heads * blocks)
        .into_par_iter()
        .map(|i| cdf_threshold_row(reduced.row(i / blocks, i % blocks), params.thr))
        .collect();
    for (i, keep) in rows.iter().enumerate() {
        for (c, &on) in keep.iter().enumerate() {
            if on {
                mask.set(i / blocks, i % blocks, c, true);
            }
        }
    }
    Ok(mask)
}

/// Multiply-accumulate count of mask generation: pooling plus the reduced
/// score matrix.
pub fn nabla_mask_cost(heads: usize, seq: usize, dim: usize, block_n: usize) -> u64 {
    let blocks = (seq / block_n) as u64;
    let (h, s, d) = (heads as u64, seq as u64, dim as u64);
    2 * h * s * d + h * blocks * blocks * d
}
