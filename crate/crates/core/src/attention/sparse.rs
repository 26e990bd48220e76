use rayon::prelude::*;

use super::{dot, AttentionInputs, FlopCount};
use crate::masks::BlockMask;

/// Tile-skipping kernel. Each query row keeps a running max `m`, running
/// normaliser `l` and unnormalised accumulator; visiting a key tile rescales
/// both by `exp(m_old - m_new)` before adding the tile's contribution.
pub(super) fn forward(
    inp: &AttentionInputs,
    heads: usize,
    seq: usize,
    dim: usize,
    mask: &BlockMask,
    block_n: usize,
) -> (Vec<f32>, FlopCount) {
    let blocks = seq / block_n;
    let tile = block_n * dim;
    let tile_macs = (block_n * block_n * dim) as u64;
    let mut out = vec![0.0f32; heads * seq * dim];
    let visited: u64 = out
        .par_chunks_mut(tile)
        .enumerate()
        .map(|(idx, out_tile)| {
            let (h, qb) = (idx / blocks, idx % blocks);
            let base = h * seq * dim;
            let q = &inp.q.data()[base..base + seq * dim];
            let k = &inp.k.data()[base..base + seq * dim];
            let v = &inp.v.data()[base..base + seq * dim];
            let active = mask.active_cols(mask.head_for(h), qb);

            let q_tile: Vec<f64> = q[qb * tile..(qb + 1) * tile].iter().map(|&x| x as f64).collect();
            let mut k_tile = vec![0.0f64; tile];
            let mut v_tile = vec![0.0f64; tile];
            let mut row_max = vec![f64::NEG_INFINITY; block_n];
            let mut row_sum = vec![0.0f64; block_n];
            let mut acc = vec![0.0f64; tile];
            let mut scores = vec![0.0f64; block_n];

            for &kb in &active {
                for (dst, &src) in k_tile.iter_mut().zip(&k[kb * tile..(kb + 1) * tile]) {
                    *dst = src as f64;
                }
                for (dst, &src) in v_tile.iter_mut().zip(&v[kb * tile..(kb + 1) * tile]) {
                    *dst = src as f64;
                }
                for r in 0..block_n {
                    let qr = &q_tile[r * dim..(r + 1) * dim];
                    let mut tile_max = f64::NEG_INFINITY;
                    for (c, s) in scores.iter_mut().enumerate() {
                        *s = inp.scale * dot(qr, &k_tile[c * dim..(c + 1) * dim]);
                        tile_max = tile_max.max(*s);
                    }
                    let new_max = row_max[r].max(tile_max);
                    let alpha = (row_max[r] - new_max).exp();
                    let acc_r = &mut acc[r * dim..(r + 1) * dim];
                    if alpha != 1.0 {
                        row_sum[r] *= alpha;
                        acc_r.iter_mut().for_each(|a| *a *= alpha);
                    }
                    for (c, &s) in scores.iter().enumerate() {
                        let e = (s - new_max).exp();
                        row_sum[r] += e;
                        for (a, &vc) in acc_r.iter_mut().zip(&v_tile[c * dim..(c + 1) * dim]) {
                            *a += e * vc;
                        }
                    }
                    row_max[r] = new_max;
                }
            }
            for r in 0..block_n {
                for (o, a) in out_tile[r * dim..(r + 1) * dim]
                    .iter_mut()
                    .zip(&acc[r * dim..(r + 1) * dim])
                {
                    *o = (a / row_sum[r]) as f32;
                }
            }
            active.len() as u64
        })
        .sum();
    let flops = FlopCount {
        score_macs: visited * tile_macs,
        value_macs: visited * tile_macs,
        mask_macs: 0,
    };
    (out, flops)
}
