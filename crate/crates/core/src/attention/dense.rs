use rayon::prelude::*;

use super::{dot, key_ranges, widen, AttentionInputs};
use crate::masks::BlockMask;

/// Two-pass softmax per query row over the keys a mask leaves visible.
pub(super) fn forward(
    inp: &AttentionInputs,
    heads: usize,
    seq: usize,
    dim: usize,
    mask: Option<(&BlockMask, usize)>,
) -> Vec<f32> {
    let per_head = seq * dim;
    let mut out = vec![0.0f32; heads * per_head];
    out.par_chunks_mut(per_head).enumerate().for_each(|(h, out_h)| {
        let span = h * per_head..(h + 1) * per_head;
        let q = widen(&inp.q.data()[span.clone()]);
        let k = widen(&inp.k.data()[span.clone()]);
        let v = widen(&inp.v.data()[span]);
        let block_n = mask.map_or(seq, |(_, n)| n);
        let mut scores = vec![0.0f64; seq];
        let mut acc = vec![0.0f64; dim];
        for qb in 0..seq / block_n {
            let ranges = key_ranges(mask, h, qb, seq);
            for i in qb * block_n..(qb + 1) * block_n {
                let qi = &q[i * dim..(i + 1) * dim];
                let mut max = f64::NEG_INFINITY;
                for j in ranges.iter().cloned().flatten() {
                    let s = inp.scale * dot(qi, &k[j * dim..(j + 1) * dim]);
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                acc.fill(0.0);
                for j in ranges.iter().cloned().flatten() {
                    let e = (scores[j] - max).exp();
                    sum += e;
                    for (a, &vj) in acc.iter_mut().zip(&v[j * dim..(j + 1) * dim]) {
                        *a += e * vj;
                    }
                }
                for (o, a) in out_h[i * dim..(i + 1) * dim].iter_mut().zip(&acc) {
                    *o = (a / sum) as f32;
                }
            }
        }
    });
    out
}
