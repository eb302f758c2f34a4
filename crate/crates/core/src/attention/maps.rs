use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, vmath, Matrix, Rng};
use crate::mimetic::HeadFactors;
use crate::posembed::PositionEmbedding;

/// Row-wise softmax in place. Each row is shifted by its maximum first, so
/// the result is bit-reproducible and never overflows.
pub fn softmax_rows(m: &mut Matrix) {
    let cols = m.cols();
    softmax_packed(m.as_mut_slice(), cols);
}

vmath::fma_dispatch!(
    /// Row-wise softmax of a row-major buffer with `cols` columns per row.
    /// Dispatch happens once per buffer, not per row.
    pub(crate) fn softmax_packed = softmax_kernel(data: &mut [f64], cols: usize)
);

#[inline(always)]
fn softmax_kernel<const FMA: bool>(data: &mut [f64], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_exact_mut(cols) {
        let max = vmath::max(row);
        row.iter_mut().for_each(|v| *v = vmath::exp_with::<FMA>(*v - max));
        let inv = 1.0 / vmath::sum(row);
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Gradient through a row softmax: `dS = A ⊙ (dA − rowsum(dA ⊙ A))`,
/// written over `grad`.
pub fn softmax_backward_rows(a: &Matrix, grad: &mut Matrix) {
    let cols = a.cols();
    softmax_backward_packed(a.as_slice(), grad.as_mut_slice(), cols);
}

vmath::fma_dispatch!(
    /// [`softmax_backward_rows`] on row-major buffers of equal shape.
    pub(crate) fn softmax_backward_packed = softmax_backward_kernel(a: &[f64], grad: &mut [f64], cols: usize)
);

#[inline(always)]
fn softmax_backward_kernel<const FMA: bool>(a: &[f64], grad: &mut [f64], cols: usize) {
    if cols == 0 {
        return;
    }
    for (ar, gr) in a.chunks_exact(cols).zip(grad.chunks_exact_mut(cols)) {
        let dot = vmath::dot(ar, gr);
        for (g, p) in gr.iter_mut().zip(ar) {
            *g = p * (*g - dot);
        }
    }
}

/// `softmax((1/√k) · X·W_Q·(X·W_K)ᵀ)`.
pub fn attention_map(x: &Matrix, head: &HeadFactors, k: usize) -> Result<Matrix> {
    let (d, hk) = head.w_q.shape();
    if x.cols() != d || head.w_k.shape() != (d, hk) || k == 0 {
        return Err(Error::Shape(format!(
            "input {}x{} does not match head factors {d}x{hk}",
            x.rows(),
            x.cols()
        )));
    }
    let q = x.matmul(&head.w_q);
    let kk = x.matmul(&head.w_k);
    let mut logits = q.matmul_t(&kk).scale(1.0 / (k as f64).sqrt());
    softmax_rows(&mut logits);
    Ok(logits)
}

/// Expected pre-softmax logits `β·(d·I + P·Pᵀ)` for `X ~ N(0, I)` inputs
/// plus position embeddings `P`.
pub fn expected_logits(beta_qk: f64, pe: &PositionEmbedding, d: usize) -> Result<Matrix> {
    if pe.dim() != d {
        return Err(Error::Shape(format!("embedding width {} is not {d}", pe.dim())));
    }
    let mut m = pe.gram();
    m.add_diag(d as f64);
    Ok(m.scale(beta_qk))
}

/// Entrywise Monte-Carlo mean and its standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct McLogits {
    pub mean: Matrix,
    /// Sample std (`T − 1` denominator) over `√T`; zero when `T = 1`.
    pub stderr: Matrix,
    pub trials: usize,
}

/// Averages `(X+P)(α·Z + β·I)(X+P)ᵀ` over `trials` fresh draws of
/// `X ~ N(0, I)` and `Z ~ N(0, I/d)`.
pub fn mc_logit_mean(
    alpha_qk: f64,
    beta_qk: f64,
    pe: &PositionEmbedding,
    d: usize,
    trials: usize,
    rng: &mut Rng,
) -> Result<McLogits> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    if pe.dim() != d {
        return Err(Error::Shape(format!("embedding width {} is not {d}", pe.dim())));
    }
    let n = pe.tokens();
    let mut mean = Matrix::zeros(n, n);
    let mut m2 = Matrix::zeros(n, n);
    let z_std = 1.0 / (d as f64).sqrt();
    for t in 1..=trials {
        let xp = gaussian_matrix(n, d, 1.0, rng).add(&pe.p);
        let mut w = gaussian_matrix(d, d, z_std, rng).scale(alpha_qk);
        w.add_diag(beta_qk);
        let sample = xp.matmul(&w).matmul_t(&xp);
        // Welford update.
        let inv_t = 1.0 / t as f64;
        for ((mu, s), &v) in mean
            .as_mut_slice()
            .iter_mut()
            .zip(m2.as_mut_slice())
            .zip(sample.as_slice())
        {
            let delta = v - *mu;
            *mu += delta * inv_t;
            *s += delta * (v - *mu);
        }
    }
    let stderr = if trials > 1 {
        let denom = ((trials - 1) * trials) as f64;
        m2.map(|s| (s / denom).sqrt())
    } else {
        Matrix::zeros(n, n)
    };
    Ok(McLogits { mean, stderr, trials })
}

/// Mean of the diagonal of a square attention map.
pub fn diagonal_mass(a: &Matrix) -> f64 {
    let n = a.rows().min(a.cols());
    if n == 0 {
        return 0.0;
    }
    a.diag().iter().sum::<f64>() / n as f64
}
