//! Reference implementations used only by tests. They are written for
//! clarity over speed and share no code with the library kernels.

#![allow(dead_code, clippy::needless_range_loop)]

use nabla_core::{BlockMask, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| scale * rng.sample::<f32, _>(StandardNormal))
            .collect(),
    )
    .unwrap()
}

/// Random mask with roughly `density` true bits and at least one per row.
pub fn rand_mask(rng: &mut ChaCha8Rng, heads: usize, blocks: usize, density: f64) -> BlockMask {
    let mut m = BlockMask::from_fn(heads, blocks, |_, _, _| rng.random_bool(density)).unwrap();
    for h in 0..heads {
        for r in 0..blocks {
            if m.row_popcount(h, r) == 0 {
                let c = rng.random_range(0..blocks);
                m.set(h, r, c, true);
            }
        }
    }
    m
}

pub fn wide(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

/// Scalar-loop attention over `[h, s, d]` f64 buffers. Masked key indices
/// are left out of the softmax denominator.
#[allow(clippy::too_many_arguments)]
pub fn oracle_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    h: usize,
    s: usize,
    d: usize,
    scale: f64,
    mask: Option<(&BlockMask, usize)>,
) -> Vec<f64> {
    let mut out = vec![0.0; h * s * d];
    for hh in 0..h {
        let base = hh * s * d;
        for i in 0..s {
            let allowed = |j: usize| match mask {
                None => true,
                Some((m, n)) => m.get(if m.heads() == 1 { 0 } else { hh }, i / n, j / n),
            };
            let mut scores = vec![f64::NEG_INFINITY; s];
            for (j, sc) in scores.iter_mut().enumerate() {
                if allowed(j) {
                    let mut acc = 0.0;
                    for c in 0..d {
                        acc += q[base + i * d + c] * k[base + j * d + c];
                    }
                    *sc = acc * scale;
                }
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|&x| (x - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for (j, wj) in w.iter().enumerate() {
                for c in 0..d {
                    out[base + i * d + c] += wj / z * v[base + j * d + c];
                }
            }
        }
    }
    out
}

/// Block-averaged softmax map, one `blocks`-long row per (head, query block).
pub fn oracle_reduced(q: &Tensor, k: &Tensor, n: usize, scale: f64) -> Vec<Vec<f64>> {
    let (h, s, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let blocks = s / n;
    let pool = |t: &Tensor, hh: usize, b: usize| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for i in b * n..(b + 1) * n {
            for c in 0..d {
                m[c] += t.data()[(hh * s + i) * d + c] as f64;
            }
        }
        m.iter().map(|x| x / n as f64).collect()
    };
    let mut rows = Vec::new();
    for hh in 0..h {
        let qp: Vec<_> = (0..blocks).map(|b| pool(q, hh, b)).collect();
        let kp: Vec<_> = (0..blocks).map(|b| pool(k, hh, b)).collect();
        for qa in &qp {
            let sc: Vec<f64> = kp
                .iter()
                .map(|ka| scale * qa.iter().zip(ka).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sc.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            rows.push(e.iter().map(|x| x / z).collect());
        }
    }
    rows
}

/// Smallest set of largest-probability entries carrying at least `thr` of
/// the row's mass. Returns `None` when the boundary is within `tie_eps` of
/// the threshold, where rounding decides the answer.
pub fn minimal_topk(row: &[f64], thr: f64, tie_eps: f64) -> Option<Vec<bool>> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(b.cmp(&a)));
    let total: f64 = row.iter().sum();
    let mut keep = vec![false; row.len()];
    if thr >= 1.0 {
        return Some(vec![true; row.len()]);
    }
    let mut acc = 0.0;
    for &c in &order {
        keep[c] = true;
        acc += row[c];
        if (acc - thr * total).abs() < tie_eps {
            return None;
        }
        if acc >= thr * total {
            break;
        }
    }
    Some(keep)
}

pub fn retained_mass(row: &[f64], keep: &[bool]) -> f64 {
    row.iter().zip(keep).filter(|(_, &k)| k).map(|(p, _)| p).sum()
}

/// Sum of `w ⊙ attention(q, k, v)`; its gradient is the backward pass with
/// `dout = w`.
#[allow(clippy::too_many_arguments)]
pub fn weighted_output(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    w: &[f64],
    h: usize,
    s: usize,
    d: usize,
    scale: f64,
    mask: Option<(&BlockMask, usize)>,
) -> f64 {
    oracle_attention(q, k, v, h, s, d, scale, mask)
        .iter()
        .zip(w)
        .map(|(a, b)| a * b)
        .sum()
}

/// Central differences of [`weighted_output`] with respect to q, k and v.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_grads(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    w: &[f64],
    h: usize,
    s: usize,
    d: usize,
    scale: f64,
    mask: Option<(&BlockMask, usize)>,
    eps: f64,
) -> [Vec<f64>; 3] {
    let mut bufs = [q.to_vec(), k.to_vec(), v.to_vec()];
    let mut grads = [vec![0.0; q.len()], vec![0.0; q.len()], vec![0.0; q.len()]];
    for which in 0..3 {
        for i in 0..q.len() {
            let orig = bufs[which][i];
            bufs[which][i] = orig + eps;
            let up = weighted_output(&bufs[0], &bufs[1], &bufs[2], w, h, s, d, scale, mask);
            bufs[which][i] = orig - eps;
            let down = weighted_output(&bufs[0], &bufs[1], &bufs[2], w, h, s, d, scale, mask);
            bufs[which][i] = orig;
            grads[which][i] = (up - down) / (2.0 * eps);
        }
    }
    grads
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
