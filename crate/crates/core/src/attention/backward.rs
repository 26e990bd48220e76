use rayon::prelude::*;

use super::{check_mask, dot, key_ranges, widen, AttentionGrad, AttentionInputs};
use crate::error::{bail, Result};
use crate::masks::BlockMask;
use crate::tensor::Tensor;

/// Gradients of `sum(dout * attention(q, k, v))` with respect to q, k and v.
///
/// With `P = softmax(scale * Q K^T)` restricted to the visible keys:
/// `dV = P^T dO`, `dS = P * (dO V^T - rowsum(dO * O))`,
/// `dQ = scale * dS K`, `dK = scale * dS^T Q`. Masked tiles are skipped and
/// contribute nothing.
pub fn attention_backward(
    inp: &AttentionInputs,
    mask: Option<(&BlockMask, usize)>,
    dout: &Tensor,
) -> Result<AttentionGrad> {
    let (heads, seq, dim) = inp.validate()?;
    if dout.shape() != inp.q.shape() {
        bail!(
            Geometry,
            "dout {:?} does not match output {:?}",
            dout.shape(),
            inp.q.shape()
        );
    }
    dout.check_finite()?;
    if let Some((m, n)) = mask {
        check_mask(m, heads, seq, n)?;
    }
    let per_head = seq * dim;
    let grads: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> = (0..heads)
        .into_par_iter()
        .map(|h| {
            let span = h * per_head..(h + 1) * per_head;
            let q = widen(&inp.q.data()[span.clone()]);
            let k = widen(&inp.k.data()[span.clone()]);
            let v = widen(&inp.v.data()[span.clone()]);
            let go = widen(&dout.data()[span]);
            head_backward(&q, &k, &v, &go, seq, dim, inp.scale, mask, h)
        })
        .collect();
    let mut dq = Vec::with_capacity(heads * per_head);
    let mut dk = Vec::with_capacity(heads * per_head);
    let mut dv = Vec::with_capacity(heads * per_head);
    for (a, b, c) in grads {
        dq.extend(a);
        dk.extend(b);
        dv.extend(c);
    }
    let shape = inp.q.shape().to_vec();
    Ok(AttentionGrad {
        dq: Tensor::new(shape.clone(), dq)?,
        dk: Tensor::new(shape.clone(), dk)?,
        dv: Tensor::new(shape, dv)?,
    })
}

#[allow(clippy::too_many_arguments)]
fn head_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    go: &[f64],
    seq: usize,
    dim: usize,
    scale: f64,
    mask: Option<(&BlockMask, usize)>,
    head: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let block_n = mask.map_or(seq, |(_, n)| n);
    let mut dq = vec![0.0f64; seq * dim];
    let mut dk = vec![0.0f64; seq * dim];
    let mut dv = vec![0.0f64; seq * dim];
    let mut scores = vec![0.0f64; seq];
    let mut dp = vec![0.0f64; seq];
    for qb in 0..seq / block_n {
        let ranges = key_ranges(mask, head, qb, seq);
        for i in qb * block_n..(qb + 1) * block_n {
            let qi = &q[i * dim..(i + 1) * dim];
            let gi = &go[i * dim..(i + 1) * dim];
            let mut max = f64::NEG_INFINITY;
            for j in ranges.iter().cloned().flatten() {
                scores[j] = scale * dot(qi, &k[j * dim..(j + 1) * dim]);
                max = max.max(scores[j]);
            }
            let mut sum = 0.0;
            for j in ranges.iter().cloned().flatten() {
                scores[j] = (scores[j] - max).exp();
                sum += scores[j];
            }
            // scores now hold probabilities; delta = sum_j p_j (dO_i . v_j)
            let mut delta = 0.0;
            for j in ranges.iter().cloned().flatten() {
                scores[j] /= sum;
                dp[j] = dot(gi, &v[j * dim..(j + 1) * dim]);
                delta += scores[j] * dp[j];
            }
            let dqi = &mut dq[i * dim..(i + 1) * dim];
            for j in ranges.iter().cloned().flatten() {
                let p = scores[j];
                let ds = p * (dp[j] - delta) * scale;
                let kj = &k[j * dim..(j + 1) * dim];
                for (a, &b) in dqi.iter_mut().zip(kj) {
                    *a += ds * b;
                }
                for (a, &b) in dk[j * dim..(j + 1) * dim].iter_mut().zip(qi) {
                    *a += ds * b;
                }
                for (a, &b) in dv[j * dim..(j + 1) * dim].iter_mut().zip(gi) {
                    *a += p * b;
                }
            }
        }
    }
    let narrow = |x: Vec<f64>| x.into_iter().map(|v| v as f32).collect::<Vec<f32>>();
    (narrow(dq), narrow(dk), narrow(dv))
}
