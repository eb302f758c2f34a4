//! Row-wise building blocks with explicit backward passes.

use crate::linalg::{vmath, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

/// Normalizes each row to zero mean and unit variance, then applies
/// `gamma` and `beta` (both `1 × d`).
pub fn layer_norm_forward(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> (Matrix, LayerNormCache) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    let mut inv_std = vec![0.0; n];
    if d > 0 {
        layer_norm_packed(
            x.as_slice(),
            gamma.as_slice(),
            beta.as_slice(),
            xhat.as_mut_slice(),
            out.as_mut_slice(),
            &mut inv_std,
        );
    }
    (out, LayerNormCache { xhat, inv_std })
}

vmath::fma_dispatch!(
    fn layer_norm_packed = layer_norm_kernel(
        x: &[f64],
        g: &[f64],
        b: &[f64],
        xhat: &mut [f64],
        out: &mut [f64],
        inv_std: &mut [f64],
    )
);

#[inline(always)]
fn layer_norm_kernel<const FMA: bool>(
    x: &[f64],
    g: &[f64],
    b: &[f64],
    xhat: &mut [f64],
    out: &mut [f64],
    inv_std: &mut [f64],
) {
    let d = g.len();
    let rows = x.chunks_exact(d).zip(xhat.chunks_exact_mut(d)).zip(out.chunks_exact_mut(d));
    for (((row, xh), o), inv_slot) in rows.zip(inv_std.iter_mut()) {
        let mean = vmath::sum(row) / d as f64;
        for (h, v) in xh.iter_mut().zip(row) {
            *h = v - mean;
        }
        let var = vmath::dot(xh, xh) / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        *inv_slot = inv;
        for (((h, o), g), b) in xh.iter_mut().zip(o.iter_mut()).zip(g).zip(b) {
            *h *= inv;
            *o = vmath::madd::<FMA>(*h, *g, *b);
        }
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &Matrix, dy: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dgamma = Matrix::zeros(1, d);
    let mut dbeta = Matrix::zeros(1, d);
    if d > 0 {
        layer_norm_backward_packed(
            cache.xhat.as_slice(),
            &cache.inv_std,
            gamma.as_slice(),
            dy.as_slice(),
            dx.as_mut_slice(),
            dgamma.as_mut_slice(),
            dbeta.as_mut_slice(),
        );
    }
    (dx, dgamma, dbeta)
}

vmath::fma_dispatch!(
    fn layer_norm_backward_packed = layer_norm_backward_kernel(
        xhat: &[f64],
        inv_std: &[f64],
        g: &[f64],
        dy: &[f64],
        dx: &mut [f64],
        dgamma: &mut [f64],
        dbeta: &mut [f64],
    )
);

#[inline(always)]
fn layer_norm_backward_kernel<const FMA: bool>(
    xhat: &[f64],
    inv_std: &[f64],
    g: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let d = g.len();
    let rows = xhat.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d));
    for (((xh, dyr), out), &inv) in rows.zip(inv_std) {
        for (((dg, db), y), h) in dgamma.iter_mut().zip(dbeta.iter_mut()).zip(dyr).zip(xh) {
            *dg = vmath::madd::<FMA>(*y, *h, *dg);
            *db += y;
        }
        // `out` holds dxhat until the final pass.
        for ((o, y), gg) in out.iter_mut().zip(dyr).zip(g) {
            *o = y * gg;
        }
        let sum = vmath::sum(out);
        let dot = vmath::dot(out, xh);
        let scale = inv / d as f64;
        for (o, h) in out.iter_mut().zip(xh) {
            *o = scale * (d as f64 * *o - sum - h * dot);
        }
    }
}

/// `x·w + b` with `b` broadcast over rows.
pub fn linear_forward(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = x.matmul(w);
    add_row(&mut y, b);
    y
}

/// Returns `(dx, dw, db)` for [`linear_forward`].
pub fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> (Matrix, Matrix, Matrix) {
    (dy.matmul_t(w), x.t_matmul(dy), dy.column_sums())
}

pub fn add_row(m: &mut Matrix, row: &Matrix) {
    let r = row.as_slice();
    for i in 0..m.rows() {
        m.row_mut(i).iter_mut().zip(r).for_each(|(v, b)| *v += b);
    }
}

/// Tanh-approximated GELU. Also returns the tanh values for the backward pass.
pub fn gelu_forward(x: &Matrix) -> (Matrix, Matrix) {
    let (n, d) = x.shape();
    let mut y = Matrix::zeros(n, d);
    let mut t = Matrix::zeros(n, d);
    gelu_packed(x.as_slice(), y.as_mut_slice(), t.as_mut_slice());
    (y, t)
}

vmath::fma_dispatch!(fn gelu_packed = gelu_kernel(x: &[f64], y: &mut [f64], t: &mut [f64]));

#[inline(always)]
fn gelu_kernel<const FMA: bool>(x: &[f64], y: &mut [f64], t: &mut [f64]) {
    for ((&v, o), th) in x.iter().zip(y.iter_mut()).zip(t.iter_mut()) {
        *th = vmath::tanh_with::<FMA>(GELU_C * (v + GELU_A * v * v * v));
        *o = 0.5 * v * (1.0 + *th);
    }
}

pub fn gelu_backward(x: &Matrix, t: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    for ((g, &v), &th) in dx.as_mut_slice().iter_mut().zip(x.as_slice()).zip(t.as_slice()) {
        let inner = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *g *= 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * inner;
    }
    dx
}

/// Mean cross-entropy over rows, its gradient with respect to the logits,
/// and the number of rows whose argmax equals the label.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix, usize) {
    let (n, c) = logits.shape();
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    let mut correct = 0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[labels[i]];
        let argmax = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        correct += usize::from(argmax == labels[i]);
        let g = grad.row_mut(i);
        for j in 0..c {
            g[j] = (row[j] - log_z).exp() / n as f64;
        }
        g[labels[i]] -= 1.0 / n as f64;
    }
    (loss / n as f64, grad, correct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, Rng};

    fn fd_check(f: impl Fn(&Matrix) -> f64, x: &Matrix, analytic: &Matrix) {
        for idx in 0..x.len().min(12) {
            let mut hi = x.clone();
            hi.as_mut_slice()[idx] += 1e-6;
            let mut lo = x.clone();
            lo.as_mut_slice()[idx] -= 1e-6;
            let num = (f(&hi) - f(&lo)) / 2e-6;
            let a = analytic.as_slice()[idx];
            assert!((a - num).abs() <= 1e-7 * a.abs().max(num.abs()).max(1.0), "{a} vs {num}");
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = Rng::seed_from_u64(0);
        let x = gaussian_matrix(3, 5, 2.0, &mut rng);
        let gamma = gaussian_matrix(1, 5, 1.0, &mut rng);
        let beta = gaussian_matrix(1, 5, 1.0, &mut rng);
        let up = gaussian_matrix(3, 5, 1.0, &mut rng);
        let (_, cache) = layer_norm_forward(&x, &gamma, &beta);
        let (dx, dg, db) = layer_norm_backward(&cache, &gamma, &up);
        fd_check(|x| layer_norm_forward(x, &gamma, &beta).0.hadamard(&up).sum(), &x, &dx);
        fd_check(|g| layer_norm_forward(&x, g, &beta).0.hadamard(&up).sum(), &gamma, &dg);
        fd_check(|b| layer_norm_forward(&x, &gamma, b).0.hadamard(&up).sum(), &beta, &db);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = gaussian_matrix(4, 16, 3.0, &mut Rng::seed_from_u64(1));
        let (y, _) = layer_norm_forward(&x, &Matrix::filled(1, 16, 1.0), &Matrix::zeros(1, 16));
        for i in 0..4 {
            let mean = y.row(i).iter().sum::<f64>() / 16.0;
            let var = y.row(i).iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn gelu_gradient_and_values() {
        let x = gaussian_matrix(2, 6, 2.0, &mut Rng::seed_from_u64(2));
        let up = gaussian_matrix(2, 6, 1.0, &mut Rng::seed_from_u64(3));
        let (_, t) = gelu_forward(&x);
        fd_check(|x| gelu_forward(x).0.hadamard(&up).sum(), &x, &gelu_backward(&x, &t, &up));
        let (y, _) = gelu_forward(&Matrix::from_vec(1, 3, vec![0.0, 20.0, -20.0]).unwrap());
        assert_eq!(y.row(0)[0], 0.0);
        assert!((y.row(0)[1] - 20.0).abs() < 1e-12 && y.row(0)[2].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_gradient() {
        let (loss, _, _) = cross_entropy(&Matrix::zeros(4, 3), &[0, 1, 2, 0]);
        assert!((loss - 3f64.ln()).abs() < 1e-15);
        let logits = gaussian_matrix(3, 4, 1.0, &mut Rng::seed_from_u64(4));
        let labels = [3, 0, 2];
        let (_, grad, _) = cross_entropy(&logits, &labels);
        fd_check(|l| cross_entropy(l, &labels).0, &logits, &grad);
    }
}
