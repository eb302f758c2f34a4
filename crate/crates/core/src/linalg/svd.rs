//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns are orthogonalized pairwise in cyclic order `(0,1), (0,2), ...,
//! (n-2,n-1)` until every pair has Gram ratio `|a_pq| / sqrt(a_pp a_qq)`
//! below [`SVD_TOLERANCE`]. Singular values are sorted descending with a
//! stable sort, so equal values keep their column order. Each column of `U`
//! is then sign-normalized so its largest-magnitude entry (lowest row index
//! on ties) is non-negative; the matching column of `V` is flipped with it.

use super::Matrix;
use crate::error::{Error, Result};

/// Convergence threshold on the off-diagonal Gram ratio.
pub const SVD_TOLERANCE: f64 = 1e-12;

/// Sweep cap before reporting [`Error::NonConvergence`].
pub const SVD_MAX_SWEEPS: usize = 60;

/// Thin SVD `M = U · diag(S) · Vᵀ` with `r = min(rows, cols)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `m × r`, orthonormal columns.
    pub u: Matrix,
    /// Length `r`, non-negative, descending.
    pub s: Vec<f64>,
    /// `n × r`, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U[:, :k] · diag(S[:k]) · V[:, :k]ᵀ`, the best rank-`k` approximation.
    pub fn truncated(&self, k: usize) -> Matrix {
        let k = k.min(self.s.len());
        let us = self.u.columns(0..k).scale_columns(&self.s[..k]);
        us.matmul_t(&self.v.columns(0..k))
    }

    pub fn reconstruct(&self) -> Matrix {
        self.truncated(self.s.len())
    }

    /// `Σ_{i ≥ k} S_i²`.
    pub fn tail_energy(&self, k: usize) -> f64 {
        self.s.iter().skip(k).map(|s| s * s).sum()
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Shape(format!(
            "svd needs a non-empty matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let mut result = if m.rows() >= m.cols() {
        jacobi_tall(m)?
    } else {
        let t = jacobi_tall(&m.transpose())?;
        SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    fix_signs(&mut result);
    Ok(result)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn rotate(p: &mut [f64], q: &mut [f64], c: f64, s: f64) {
    for (x, y) in p.iter_mut().zip(q.iter_mut()) {
        let (bp, bq) = (*x, *y);
        *x = c * bp - s * bq;
        *y = s * bp + c * bq;
    }
}

fn pair_mut(cols: &mut [Vec<f64>], p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (lo, hi) = cols.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

/// SVD of a matrix with `rows >= cols`.
fn jacobi_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let mut b: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[(i, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // Columns whose squared norm is at rounding level relative to the whole
    // matrix are treated as exact zeros and excluded from the Gram test.
    let frob2: f64 = a.as_slice().iter().map(|x| x * x).sum();
    let negligible = (f64::EPSILON * f64::EPSILON) * frob2;

    let mut converged = false;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let app = dot(&b[p], &b[p]);
                let aqq = dot(&b[q], &b[q]);
                if app <= negligible || aqq <= negligible {
                    continue;
                }
                let apq = dot(&b[p], &b[q]);
                if apq.abs() < SVD_TOLERANCE * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (bp, bq) = pair_mut(&mut b, p, q);
                rotate(bp, bq, c, s);
                let (vp, vq) = pair_mut(&mut v, p, q);
                rotate(vp, vq, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            sweeps: SVD_MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = b.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let threshold = negligible.sqrt();
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v_sorted = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let norm = norms[src];
        if norm > threshold && norm > 0.0 {
            u_cols.push(Some(b[src].iter().map(|x| x / norm).collect()));
            s.push(norm);
        } else {
            u_cols.push(None);
            s.push(0.0);
        }
        for i in 0..n {
            v_sorted[(i, dst)] = v[src][i];
        }
    }
    let u_cols = complete_basis(u_cols, m);
    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    Ok(SvdResult { u, s, v: v_sorted })
}

/// Fills missing columns (zero singular values) with unit vectors orthogonal
/// to all others, taken from the canonical basis by Gram–Schmidt.
fn complete_basis(cols: Vec<Option<Vec<f64>>>, m: usize) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut candidate = 0usize;
    let mut out = Vec::with_capacity(cols.len());
    for col in cols {
        match col {
            Some(c) => out.push(c),
            None => loop {
                assert!(candidate < m, "cannot complete basis");
                let mut e = vec![0.0; m];
                e[candidate] = 1.0;
                candidate += 1;
                for _ in 0..2 {
                    for d in &done {
                        let proj = dot(&e, d);
                        e.iter_mut().zip(d).for_each(|(x, y)| *x -= proj * y);
                    }
                }
                let norm = dot(&e, &e).sqrt();
                if norm > 0.5 {
                    e.iter_mut().for_each(|x| *x /= norm);
                    done.push(e.clone());
                    out.push(e);
                    break;
                }
            },
        }
    }
    out
}

fn fix_signs(r: &mut SvdResult) {
    let (m, k) = r.u.shape();
    for j in 0..k {
        let mut best = 0usize;
        for i in 1..m {
            if r.u[(i, j)].abs() > r.u[(best, j)].abs() {
                best = i;
            }
        }
        if r.u[(best, j)] < 0.0 {
            for i in 0..m {
                r.u[(i, j)] = -r.u[(i, j)];
            }
            for i in 0..r.v.rows() {
                r.v[(i, j)] = -r.v[(i, j)];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, Rng};

    fn orthonormality_error(q: &Matrix) -> f64 {
        q.t_matmul(q).sub(&Matrix::identity(q.cols())).max_abs()
    }

    fn rel_residual(m: &Matrix, r: &SvdResult) -> f64 {
        r.reconstruct().sub(m).frobenius_norm() / m.frobenius_norm()
    }

    #[test]
    fn identity_decomposes_to_identity() {
        let r = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(r.s, vec![1.0, 1.0, 1.0]);
        assert_eq!(r.u, Matrix::identity(3));
        assert_eq!(r.v, Matrix::identity(3));
    }

    #[test]
    fn sign_convention_on_negative_diagonal() {
        let r = svd(&Matrix::from_diag(&[3.0, -2.0])).unwrap();
        assert_eq!(r.s, vec![3.0, 2.0]);
        assert_eq!(r.u, Matrix::identity(2));
        assert_eq!(r.v, Matrix::from_diag(&[1.0, -1.0]));
    }

    #[test]
    fn sorts_descending() {
        let r = svd(&Matrix::from_diag(&[1.0, 5.0, 3.0])).unwrap();
        assert_eq!(r.s, vec![5.0, 3.0, 1.0]);
        assert!(rel_residual(&Matrix::from_diag(&[1.0, 5.0, 3.0]), &r) < 1e-15);
    }

    #[test]
    fn random_square_reconstructs() {
        let m = gaussian_matrix(8, 8, 1.0, &mut Rng::seed_from_u64(2));
        let r = svd(&m).unwrap();
        assert!(rel_residual(&m, &r) < 1e-10);
        assert!(orthonormality_error(&r.u) < 1e-10);
        assert!(orthonormality_error(&r.v) < 1e-10);
    }

    #[test]
    fn wide_and_tall_shapes() {
        for (rows, cols) in [(7, 3), (3, 7), (1, 5), (5, 1)] {
            let m = gaussian_matrix(rows, cols, 1.0, &mut Rng::seed_from_u64(rows as u64 * 31 + cols as u64));
            let r = svd(&m).unwrap();
            assert_eq!(r.u.shape(), (rows, rows.min(cols)));
            assert_eq!(r.v.shape(), (cols, rows.min(cols)));
            assert!(rel_residual(&m, &r) < 1e-10);
            assert!(orthonormality_error(&r.u) < 1e-10);
            assert!(orthonormality_error(&r.v) < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_input_keeps_orthonormal_factors() {
        let a = gaussian_matrix(6, 2, 1.0, &mut Rng::seed_from_u64(4));
        let m = a.matmul_t(&a);
        let r = svd(&m).unwrap();
        assert!(r.s[2..].iter().all(|&s| s < 1e-12));
        assert!(rel_residual(&m, &r) < 1e-10);
        assert!(orthonormality_error(&r.u) < 1e-10);
        assert!(orthonormality_error(&r.v) < 1e-10);
    }

    #[test]
    fn zero_matrix() {
        let r = svd(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(r.s, vec![0.0; 3]);
        assert!(orthonormality_error(&r.u) < 1e-15);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(svd(&Matrix::zeros(0, 3)), Err(Error::Shape(_))));
        let mut m = Matrix::identity(2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn deterministic_output() {
        let m = gaussian_matrix(12, 9, 1.0, &mut Rng::seed_from_u64(8));
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.s, b.s);
        assert_eq!(a.v, b.v);
    }
}
