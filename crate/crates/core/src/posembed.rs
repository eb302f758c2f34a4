//! Additive position embeddings and their Gram matrix `P·Pᵀ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, Matrix, Rng};

/// Per-entry standard deviation of the `random` embedding kind.
pub const RANDOM_POS_EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbedKind {
    Sinusoidal,
    Random,
}

impl PosEmbedKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PosEmbedKind::Sinusoidal => "sinusoidal",
            PosEmbedKind::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionEmbedding {
    /// `n × d`, or `(n + 1) × d` with a leading all-zero class-token row.
    pub p: Matrix,
    pub gamma: f64,
    pub kind: PosEmbedKind,
    pub class_token: bool,
}

impl PositionEmbedding {
    /// Number of rows, including the class-token row if present.
    pub fn tokens(&self) -> usize {
        self.p.rows()
    }

    pub fn dim(&self) -> usize {
        self.p.cols()
    }

    /// `P·Pᵀ`.
    pub fn gram(&self) -> Matrix {
        self.p.matmul_t(&self.p)
    }
}

/// Fixed sinusoid over the flattened token index `t ∈ [0, n)`:
/// `P[t, 2j] = γ sin(t / 10000^(2j/d))`, `P[t, 2j+1] = γ cos(t / 10000^(2j/d))`.
pub fn sinusoidal(n: usize, d: usize, gamma: f64, class_token: bool) -> Result<PositionEmbedding> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "sinusoidal embeddings need an even, positive width, got {d}"
        )));
    }
    if n == 0 {
        return Err(Error::Shape("sinusoidal embeddings need n >= 1".into()));
    }
    check_gamma(gamma)?;
    let offset = usize::from(class_token);
    let mut p = Matrix::zeros(n + offset, d);
    for t in 0..n {
        let row = p.row_mut(t + offset);
        for j in 0..d / 2 {
            let freq = 10000f64.powf(-((2 * j) as f64) / d as f64);
            let angle = t as f64 * freq;
            row[2 * j] = gamma * angle.sin();
            row[2 * j + 1] = gamma * angle.cos();
        }
    }
    Ok(PositionEmbedding {
        p,
        gamma,
        kind: PosEmbedKind::Sinusoidal,
        class_token,
    })
}

/// `γ · N(0, 0.02²)` entries; the class-token row, if any, is zero.
pub fn random(
    n: usize,
    d: usize,
    gamma: f64,
    class_token: bool,
    rng: &mut Rng,
) -> Result<PositionEmbedding> {
    if n == 0 || d == 0 {
        return Err(Error::Shape(format!("random embeddings need n, d >= 1, got {n}x{d}")));
    }
    check_gamma(gamma)?;
    let body = gaussian_matrix(n, d, gamma * RANDOM_POS_EMBED_STD, rng);
    let p = if class_token {
        let mut p = Matrix::zeros(n + 1, d);
        p.set_rows(1, &body);
        p
    } else {
        body
    };
    Ok(PositionEmbedding {
        p,
        gamma,
        kind: PosEmbedKind::Random,
        class_token,
    })
}

/// Dispatches on `kind`. The generator is only consumed for `Random`.
pub fn build(
    kind: PosEmbedKind,
    n: usize,
    d: usize,
    gamma: f64,
    class_token: bool,
    rng: &mut Rng,
) -> Result<PositionEmbedding> {
    match kind {
        PosEmbedKind::Sinusoidal => sinusoidal(n, d, gamma, class_token),
        PosEmbedKind::Random => random(n, d, gamma, class_token, rng),
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "position-embedding scale must be finite and non-negative, got {gamma}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gamma_is_zero() {
        let pe = sinusoidal(10, 8, 0.0, false).unwrap();
        assert_eq!(pe.p, Matrix::zeros(10, 8));
    }

    #[test]
    fn odd_width_rejected() {
        assert!(matches!(sinusoidal(4, 7, 1.0, false), Err(Error::Shape(_))));
    }

    #[test]
    fn row_norms_are_constant() {
        // sin² + cos² = 1 per frequency pair, d/2 pairs.
        let pe = sinusoidal(16, 8, 1.0, false).unwrap();
        for t in 0..16 {
            let norm = pe.p.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 2.0).abs() < 1e-9, "row {t}: {norm}");
        }
        let pe = sinusoidal(30, 64, 2.0, true).unwrap();
        assert!(pe.p.row(0).iter().all(|&v| v == 0.0));
        for t in 1..31 {
            let norm = pe.p.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 2.0 * 32f64.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn first_row_matches_closed_form() {
        let pe = sinusoidal(3, 4, 1.5, false).unwrap();
        // t = 0: sin 0 = 0, cos 0 = 1.
        assert_eq!(pe.p.row(0), &[0.0, 1.5, 0.0, 1.5]);
        // t = 2, j = 1: angle = 2 / 10000^(2/4) = 0.02.
        assert!((pe.p[(2, 2)] - 1.5 * 0.02f64.sin()).abs() < 1e-15);
        assert!((pe.p[(2, 3)] - 1.5 * 0.02f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn gram_is_toeplitz_with_constant_diagonal() {
        let pe = sinusoidal(40, 32, 2.0, false).unwrap();
        let g = pe.gram();
        let expected_diag = 4.0 * 32.0 / 2.0;
        for t in 0..40 {
            assert!((g[(t, t)] - expected_diag).abs() < 1e-9);
        }
        for (a, b, shift) in [(0, 5, 7), (3, 11, 20), (10, 2, 13), (1, 30, 4), (25, 25, 9)] {
            assert!((g[(a, b)] - g[(a + shift, b + shift)]).abs() < 1e-9);
            assert!((g[(a, b)] - g[(b, a)]).abs() < 1e-12);
        }
    }

    #[test]
    fn random_kind_scale_and_class_row() {
        let mut rng = Rng::seed_from_u64(3);
        let pe = random(200, 50, 1.0, true, &mut rng).unwrap();
        assert_eq!(pe.tokens(), 201);
        assert!(pe.p.row(0).iter().all(|&v| v == 0.0));
        let body = pe.p.rows_range(1..201);
        let std = (body.as_slice().iter().map(|v| v * v).sum::<f64>() / body.len() as f64).sqrt();
        assert!((std - RANDOM_POS_EMBED_STD).abs() < 0.001);
    }
}
