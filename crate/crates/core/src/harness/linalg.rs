//! Row-major f32 matrix helpers for the toy model.

/// `a[m, k] * b[k, n]`.
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    for (row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&x, b_row) in row.iter().zip(b.chunks_exact(n)) {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
    out
}

/// `acc[k, n] += a[m, k]^T * b[m, n]`.
pub(crate) fn add_matmul_at_b(acc: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(acc.len(), k * n);
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)).take(m) {
        for (&x, acc_row) in a_row.iter().zip(acc.chunks_exact_mut(n)) {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in acc_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
}

/// `a[m, n] * b[k, n]^T`.
pub(crate) fn matmul_a_bt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = Vec::with_capacity(m * k);
    for a_row in a.chunks_exact(n) {
        for b_row in b.chunks_exact(n) {
            out.push(a_row.iter().zip(b_row).map(|(x, y)| x * y).sum());
        }
    }
    out
}

pub(crate) fn add_bias(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn add_column_sums(acc: &mut [f32], x: &[f32]) {
    for row in x.chunks_exact(acc.len()) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

pub(crate) fn add_assign(acc: &mut [f32], x: &[f32]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

const LN_EPS: f32 = 1e-5;

/// Parameter-free layer norm over rows of width `n`. Returns the normalised
/// rows and the per-row inverse standard deviations.
pub(crate) fn layer_norm(x: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
    let mut y = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.len() / n);
    for row in x.chunks_exact(n) {
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let r = 1.0 / (var + LN_EPS).sqrt();
        y.extend(row.iter().map(|v| (v - mean) * r));
        inv_std.push(r);
    }
    (y, inv_std)
}

/// `dx = r * (dy - mean(dy) - y * mean(dy * y))` row by row.
pub(crate) fn layer_norm_backward(y: &[f32], inv_std: &[f32], dy: &[f32], n: usize) -> Vec<f32> {
    let mut dx = Vec::with_capacity(dy.len());
    for ((y_row, dy_row), &r) in y.chunks_exact(n).zip(dy.chunks_exact(n)).zip(inv_std) {
        let mean_dy = dy_row.iter().sum::<f32>() / n as f32;
        let mean_dyy = dy_row.iter().zip(y_row).map(|(a, b)| a * b).sum::<f32>() / n as f32;
        dx.extend(
            y_row
                .iter()
                .zip(dy_row)
                .map(|(&yv, &g)| r * (g - mean_dy - yv * mean_dyy)),
        );
    }
    dx
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

pub(crate) fn gelu(u: f32) -> f32 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044_715 * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f32) -> f32 {
    let inner = GELU_C * (u + 0.044_715 * u * u * u);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * u * u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f32> = (0..6).map(|i| i as f32 - 2.0).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|i| (i as f32 * 0.5).sin()).collect(); // 3x4
        let ab = matmul(&a, &b, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f32 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((ab[i * 4 + j] - want).abs() < 1e-6);
            }
        }
        // a^T * ab : [3, 4]
        let mut acc = vec![0.0; 12];
        add_matmul_at_b(&mut acc, &a, &ab, 2, 3, 4);
        for i in 0..3 {
            for j in 0..4 {
                let want: f32 = (0..2).map(|r| a[r * 3 + i] * ab[r * 4 + j]).sum();
                assert!((acc[i * 4 + j] - want).abs() < 1e-5);
            }
        }
        // ab * b^T : [2, 3]
        let abt = matmul_a_bt(&ab, &b, 2, 4, 3);
        for i in 0..2 {
            for j in 0..3 {
                let want: f32 = (0..4).map(|p| ab[i * 4 + p] * b[j * 4 + p]).sum();
                assert!((abt[i * 3 + j] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &u in &[-3.0f32, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-2f32;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-3, "u = {u}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let x = [0.3f32, -1.2, 2.0, 0.5, 1.0, 1.5, -0.5, 0.0];
        let w = [0.7f32, -0.1, 0.4, 1.3, -0.6, 0.2, 0.9, -1.1];
        let loss = |x: &[f32]| -> f32 {
            let (y, _) = layer_norm(x, 4);
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (y, r) = layer_norm(&x, 4);
        let dx = layer_norm_backward(&y, &r, &w, 4);
        for i in 0..x.len() {
            let mut p = x;
            let mut m = x;
            p[i] += 1e-2;
            m[i] -= 1e-2;
            let fd = (loss(&p) - loss(&m)) / 2e-2;
            assert!((fd - dx[i]).abs() < 2e-3, "i = {i}: {fd} vs {}", dx[i]);
        }
    }
}
