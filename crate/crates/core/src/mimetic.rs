//! Closed-form self-attention initialization.
//!
//! The query/key product of every head is built to approximate `α·Z + β·I`
//! and the value/projection product to approximate `α·Z − β·I`, with
//! `Z ~ N(0, I/d)`. Two constructions are provided: a truncated SVD of the
//! explicit target (full control over `α` and `β`), and equal random factors
//! (a single scale, so `α` and `β` move together).

use serde::{Deserialize, Serialize};

use crate::arch::ModelArch;
use crate::error::{Error, Result};
use crate::inspect::{names, Checkpoint, Tensor};
use crate::linalg::{gaussian_matrix, hash64, svd, Matrix, Rng};
use crate::posembed::{self, PosEmbedKind};

/// Entry std of conventionally initialized attention weights.
pub const DEFAULT_WEIGHT_STD: f64 = 0.02;

/// Floor on the off-diagonal std in [`estimate_alpha_beta`].
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Svd,
    EqualMatrix,
}

/// Sign of the identity term in the value/projection product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VpSign {
    Negative,
    Positive,
}

impl VpSign {
    pub fn factor(self) -> f64 {
        match self {
            VpSign::Negative => -1.0,
            VpSign::Positive => 1.0,
        }
    }
}

/// How the SVD of the value/projection target is split between factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VpFactorization {
    /// `W_V = U Σ^½`, `W_proj = Σ^½ Vᵀ`; the product equals the target.
    SymmetricSqrt,
    /// `W_V = U Σ`, `W_proj = (V Σ^½)ᵀ`; the product is `U Σ^{3/2} Vᵀ`.
    AsWritten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub alpha_qk: f64,
    pub beta_qk: f64,
    pub alpha_vp: f64,
    pub beta_vp: f64,
    pub method: Method,
    pub vp_sign: VpSign,
    pub vp_factorization: VpFactorization,
    pub pos_embed_scale: f64,
    pub pos_embed_kind: PosEmbedKind,
    /// When false the query/key weights get the conventional `N(0, 0.02²)`.
    pub mimic_qk: bool,
    /// When false the value/projection weights get `N(0, 0.02²)`.
    pub mimic_vp: bool,
}

impl InitSpec {
    /// Small-image vision preset: `(0.7, 0.7)` for QK, `(0.4, 0.4)` for VP, γ = 2.
    pub fn vision() -> Self {
        Self {
            alpha_qk: 0.7,
            beta_qk: 0.7,
            alpha_vp: 0.4,
            beta_vp: 0.4,
            method: Method::Svd,
            vp_sign: VpSign::Negative,
            vp_factorization: VpFactorization::SymmetricSqrt,
            pos_embed_scale: 2.0,
            pos_embed_kind: PosEmbedKind::Sinusoidal,
            mimic_qk: true,
            mimic_vp: true,
        }
    }

    /// Same weights as [`InitSpec::vision`] with unit position-embedding scale.
    pub fn vision_imagenet() -> Self {
        Self {
            pos_embed_scale: 1.0,
            ..Self::vision()
        }
    }

    /// Language preset: `α_qk = 0`, `β_qk = 0.5`, `α_vp = β_vp = 0.2`.
    pub fn language() -> Self {
        Self {
            alpha_qk: 0.0,
            beta_qk: 0.5,
            alpha_vp: 0.2,
            beta_vp: 0.2,
            pos_embed_scale: 1.0,
            ..Self::vision()
        }
    }

    /// Conventional initialization: no mimicry, random position embeddings.
    pub fn baseline() -> Self {
        Self {
            mimic_qk: false,
            mimic_vp: false,
            pos_embed_scale: 1.0,
            pos_embed_kind: PosEmbedKind::Random,
            ..Self::vision()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_qk", self.alpha_qk),
            ("beta_qk", self.beta_qk),
            ("alpha_vp", self.alpha_vp),
            ("beta_vp", self.beta_vp),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.pos_embed_scale.is_finite() && self.pos_embed_scale >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "position-embedding scale {} must be non-negative",
                self.pos_embed_scale
            )));
        }
        Ok(())
    }
}

/// Query/key factors of one head, both `d × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadFactors {
    pub w_q: Matrix,
    pub w_k: Matrix,
}

impl HeadFactors {
    /// `W_Q · W_Kᵀ` (`d × d`, rank ≤ `k`).
    pub fn product(&self) -> Matrix {
        self.w_q.matmul_t(&self.w_k)
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }
}

/// Value and projection weights, both `d × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct VpFactors {
    pub w_v: Matrix,
    pub w_proj: Matrix,
}

impl VpFactors {
    /// `W_V · W_proj`.
    pub fn product(&self) -> Matrix {
        self.w_v.matmul(&self.w_proj)
    }
}

/// Diagonal prominence of a square product matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaBetaEstimate {
    pub alpha_hat: f64,
    pub beta_hat: f64,
    pub diag_z_score: f64,
}

fn check_coefficients(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha.is_finite() && beta.is_finite() && alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha and beta must be finite and non-negative, got ({alpha}, {beta})"
        )));
    }
    Ok(())
}

/// Target `α·Z + s·β·I` with a fresh `Z ~ N(0, I/d)`.
fn noisy_identity(d: usize, alpha: f64, signed_beta: f64, rng: &mut Rng) -> Matrix {
    let mut t = gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), rng).scale(alpha);
    t.add_diag(signed_beta);
    t
}

/// Rank-`k` query/key factors whose product is the best rank-`k`
/// approximation of `α·Z + β·I`. Draws a fresh `Z` on every call.
pub fn construct_qk_head(d: usize, k: usize, alpha: f64, beta: f64, rng: &mut Rng) -> Result<HeadFactors> {
    if k == 0 || k > d {
        return Err(Error::Shape(format!("head dimension {k} must be in [1, {d}]")));
    }
    check_coefficients(alpha, beta)?;
    let target = noisy_identity(d, alpha, beta, rng);
    let svd = svd(&target)?;
    let root: Vec<f64> = svd.s[..k].iter().map(|s| s.sqrt()).collect();
    Ok(HeadFactors {
        w_q: svd.u.columns(0..k).scale_columns(&root),
        w_k: svd.v.columns(0..k).scale_columns(&root),
    })
}

/// Full-rank value/projection factors for `α·Z ± β·I`.
pub fn construct_vp(
    d: usize,
    alpha: f64,
    beta: f64,
    sign: VpSign,
    variant: VpFactorization,
    rng: &mut Rng,
) -> Result<VpFactors> {
    if d == 0 {
        return Err(Error::Shape("width must be positive".into()));
    }
    check_coefficients(alpha, beta)?;
    let target = noisy_identity(d, alpha, sign.factor() * beta, rng);
    let svd = svd(&target)?;
    let root: Vec<f64> = svd.s.iter().map(|s| s.sqrt()).collect();
    let proj_t = svd.v.scale_columns(&root);
    let w_v = match variant {
        VpFactorization::SymmetricSqrt => svd.u.scale_columns(&root),
        VpFactorization::AsWritten => svd.u.scale_columns(&svd.s),
    };
    Ok(VpFactors {
        w_v,
        w_proj: proj_t.transpose(),
    })
}

/// `W_Q = W_K = c · N(0, I/k)`.
pub fn construct_equal_qk(d: usize, k: usize, scale: f64, rng: &mut Rng) -> Result<HeadFactors> {
    if k == 0 || k > d {
        return Err(Error::Shape(format!("head dimension {k} must be in [1, {d}]")));
    }
    let z = gaussian_matrix(d, k, scale / (k as f64).sqrt(), rng);
    Ok(HeadFactors { w_q: z.clone(), w_k: z })
}

/// `W_V = Z`, `W_proj = ∓Zᵀ` with `Z = c · N(0, I/d)`, so the product is
/// `∓Z·Zᵀ` and its diagonal averages `∓c²`.
pub fn construct_equal_vp(d: usize, scale: f64, sign: VpSign, rng: &mut Rng) -> Result<VpFactors> {
    if d == 0 {
        return Err(Error::Shape("width must be positive".into()));
    }
    let z = gaussian_matrix(d, d, scale / (d as f64).sqrt(), rng);
    let w_proj = z.transpose().scale(sign.factor());
    Ok(VpFactors { w_v: z, w_proj })
}

/// Measures `(α, β)` of a square matrix read as `α·Z + s·β·I`.
///
/// `beta_hat` is the diagonal mean (negated for [`VpSign::Negative`]),
/// `alpha_hat` is `√d` times the population std of the off-diagonal entries,
/// and `diag_z_score` is the raw (unsigned-adjusted) diagonal mean over that
/// std, floored at [`STD_FLOOR`].
pub fn estimate_alpha_beta(m: &Matrix, sign: VpSign) -> Result<AlphaBetaEstimate> {
    if !m.is_square() || m.rows() < 2 {
        return Err(Error::Shape(format!(
            "estimator needs a square matrix with d >= 2, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let d = m.rows();
    let diag_mean = m.trace() / d as f64;
    let count = (d * d - d) as f64;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for i in 0..d {
        for (j, &v) in m.row(i).iter().enumerate() {
            if i != j {
                sum += v;
                sum_sq += v * v;
            }
        }
    }
    let mean = sum / count;
    let var = (sum_sq / count - mean * mean).max(0.0);
    let std = var.sqrt();
    Ok(AlphaBetaEstimate {
        alpha_hat: (d as f64).sqrt() * std,
        beta_hat: sign.factor() * diag_mean,
        diag_z_score: diag_mean / std.max(STD_FLOOR),
    })
}

/// Grid for [`feasibility_sweep`]: `(α, β)` pairs for the SVD construction,
/// scales `c` for equal matrices.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepGrid {
    AlphaBeta(Vec<(f64, f64)>),
    Scales(Vec<f64>),
}

impl SweepGrid {
    /// `steps × steps` evenly spaced points covering `[0, 1]²`.
    pub fn unit_square(steps: usize) -> Self {
        let ticks: Vec<f64> = (0..steps)
            .map(|i| if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 })
            .collect();
        let mut points = Vec::with_capacity(steps * steps);
        for &a in &ticks {
            for &b in &ticks {
                points.push((a, b));
            }
        }
        SweepGrid::AlphaBeta(points)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum SweepPoint {
    AlphaBeta { alpha: f64, beta: f64 },
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub alpha_hat: f64,
    pub beta_hat: f64,
}

/// Builds one query/key head per grid point and measures the achieved
/// `(α̂, β̂)` of its product.
pub fn feasibility_sweep(
    method: Method,
    d: usize,
    k: usize,
    grid: &SweepGrid,
    rng: &mut Rng,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    match (method, grid) {
        (Method::Svd, SweepGrid::AlphaBeta(points)) => {
            if points.is_empty() {
                return Err(Error::InvalidParameter("empty sweep grid".into()));
            }
            for &(alpha, beta) in points {
                let head = construct_qk_head(d, k, alpha, beta, rng)?;
                let est = estimate_alpha_beta(&head.product(), VpSign::Positive)?;
                rows.push(SweepRow {
                    point: SweepPoint::AlphaBeta { alpha, beta },
                    alpha_hat: est.alpha_hat,
                    beta_hat: est.beta_hat,
                });
            }
        }
        (Method::EqualMatrix, SweepGrid::Scales(scales)) => {
            if scales.is_empty() {
                return Err(Error::InvalidParameter("empty sweep grid".into()));
            }
            for &c in scales {
                let head = construct_equal_qk(d, k, c, rng)?;
                let est = estimate_alpha_beta(&head.product(), VpSign::Positive)?;
                rows.push(SweepRow {
                    point: SweepPoint::Scale(c),
                    alpha_hat: est.alpha_hat,
                    beta_hat: est.beta_hat,
                });
            }
        }
        (Method::Svd, _) => {
            return Err(Error::InvalidParameter("the SVD sweep takes (alpha, beta) points".into()))
        }
        (Method::EqualMatrix, _) => {
            return Err(Error::InvalidParameter("the equal-matrix sweep takes scales".into()))
        }
    }
    Ok(rows)
}

/// Least-squares line `y = slope · x` through the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OriginFit {
    pub slope: f64,
    /// `1 − SS_res / SS_tot` with `SS_tot` taken about the mean of `y`.
    pub r_squared: f64,
}

pub fn fit_through_origin(points: &[(f64, f64)]) -> OriginFit {
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let n = points.len().max(1) as f64;
    let mean_y = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let ss_res: f64 = points.iter().map(|(x, y)| (y - slope * x).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|(_, y)| (y - mean_y).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    OriginFit { slope, r_squared }
}

/// Which tensors [`init_transformer`] emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScope {
    /// Query/key/value/projection weights and position embeddings.
    Attention,
    /// Additionally patch embedding, norms, MLPs, class token and head,
    /// conventionally initialized and listed in `default_initialized`.
    Full,
}

const STREAM_VP: u64 = 1 << 40;
const STREAM_EXTRA: u64 = 1 << 41;
const STREAM_GLOBAL: u64 = u64::MAX;

/// Model-wide initialization.
///
/// Every layer/head draws from its own sub-seed `hash64(seed, layer, head)`,
/// so the result does not depend on construction order. Query/key factors
/// are stored per head; the value/projection pair is stored full-width, so
/// head `h` uses columns `[hk, (h+1)k)` of `W_V` and the same rows of
/// `W_proj`. The class-token row of the position embedding is zero.
pub fn init_transformer(arch: &ModelArch, spec: &InitSpec, seed: u64, scope: InitScope) -> Result<Checkpoint> {
    arch.validate()?;
    spec.validate()?;
    let (d, k) = (arch.d, arch.head_dim());
    let mut ckpt = Checkpoint::new();

    for layer in 0..arch.depth {
        for head in 0..arch.heads {
            let mut rng = Rng::seed_from_u64(hash64(seed, layer as u64, head as u64));
            let factors = if !spec.mimic_qk {
                let w_q = gaussian_matrix(d, k, DEFAULT_WEIGHT_STD, &mut rng);
                let w_k = gaussian_matrix(d, k, DEFAULT_WEIGHT_STD, &mut rng);
                HeadFactors { w_q, w_k }
            } else {
                match spec.method {
                    Method::Svd => construct_qk_head(d, k, spec.alpha_qk, spec.beta_qk, &mut rng)?,
                    Method::EqualMatrix => construct_equal_qk(d, k, spec.beta_qk.sqrt(), &mut rng)?,
                }
            };
            ckpt.insert(names::q_head(layer, head), factors.w_q);
            ckpt.insert(names::k_head(layer, head), factors.w_k);
        }
        let mut rng = Rng::seed_from_u64(hash64(seed, layer as u64, STREAM_VP));
        let vp = if !spec.mimic_vp {
            let w_v = gaussian_matrix(d, d, DEFAULT_WEIGHT_STD, &mut rng);
            let w_proj = gaussian_matrix(d, d, DEFAULT_WEIGHT_STD, &mut rng);
            VpFactors { w_v, w_proj }
        } else {
            match spec.method {
                Method::Svd => construct_vp(
                    d,
                    spec.alpha_vp,
                    spec.beta_vp,
                    spec.vp_sign,
                    spec.vp_factorization,
                    &mut rng,
                )?,
                Method::EqualMatrix => construct_equal_vp(d, spec.beta_vp.sqrt(), spec.vp_sign, &mut rng)?,
            }
        };
        ckpt.insert(names::v(layer), vp.w_v);
        ckpt.insert(names::proj(layer), vp.w_proj);
    }

    let mut rng = Rng::seed_from_u64(hash64(seed, STREAM_GLOBAL, 0));
    let pe = posembed::build(
        spec.pos_embed_kind,
        arch.n_tokens,
        d,
        spec.pos_embed_scale,
        arch.class_token,
        &mut rng,
    )?;
    ckpt.insert(names::POS_EMBED, pe.p);

    let mut defaults = Vec::new();
    if scope == InitScope::Full {
        add_default_tensors(arch, seed, &mut ckpt, &mut defaults);
    }

    ckpt.set_meta("d", d);
    ckpt.set_meta("depth", arch.depth);
    ckpt.set_meta("heads", arch.heads);
    ckpt.set_meta("n_tokens", arch.n_tokens);
    ckpt.set_meta("class_token", arch.class_token);
    ckpt.set_meta("source", "mimetic-init");
    ckpt.set_meta("seed", seed);
    ckpt.set_meta("method", format!("{:?}", spec.method));
    ckpt.set_meta("mimic_qk", spec.mimic_qk);
    ckpt.set_meta("mimic_vp", spec.mimic_vp);
    ckpt.set_meta("alpha_qk", spec.alpha_qk);
    ckpt.set_meta("beta_qk", spec.beta_qk);
    ckpt.set_meta("alpha_vp", spec.alpha_vp);
    ckpt.set_meta("beta_vp", spec.beta_vp);
    ckpt.set_meta("vp_sign", format!("{:?}", spec.vp_sign));
    ckpt.set_meta("vp_factorization", format!("{:?}", spec.vp_factorization));
    ckpt.set_meta("pos_embed_kind", spec.pos_embed_kind.as_str());
    ckpt.set_meta("pos_embed_scale", spec.pos_embed_scale);
    ckpt.set_meta("default_initialized", defaults.join(","));
    Ok(ckpt)
}

/// Fan-in-scaled normal weights, zero biases, unit norm gains; the
/// classifier head and class token use `N(0, 0.02²)`.
fn add_default_tensors(arch: &ModelArch, seed: u64, ckpt: &mut Checkpoint, names_out: &mut Vec<String>) {
    let d = arch.d;
    let hidden = arch.mlp_hidden();
    let mut put = |ckpt: &mut Checkpoint, name: String, t: Tensor| {
        names_out.push(name.clone());
        ckpt.insert(name, t);
    };
    let fan_in = |n: usize| 1.0 / (n as f64).sqrt();

    let mut rng = Rng::seed_from_u64(hash64(seed, STREAM_GLOBAL, 1));
    put(
        ckpt,
        names::PATCH_WEIGHT.into(),
        gaussian_matrix(arch.patch_dim, d, fan_in(arch.patch_dim), &mut rng).into(),
    );
    put(ckpt, names::PATCH_BIAS.into(), Tensor::vector(vec![0.0; d]));
    if arch.class_token {
        let cls = gaussian_matrix(1, d, DEFAULT_WEIGHT_STD, &mut rng).into_vec();
        put(ckpt, names::CLS_TOKEN.into(), Tensor::vector(cls));
    }
    for layer in 0..arch.depth {
        let mut rng = Rng::seed_from_u64(hash64(seed, layer as u64, STREAM_EXTRA));
        put(ckpt, names::block(layer, "norm1.weight"), Tensor::vector(vec![1.0; d]));
        put(ckpt, names::block(layer, "norm1.bias"), Tensor::vector(vec![0.0; d]));
        put(ckpt, names::block(layer, "attn.proj.bias"), Tensor::vector(vec![0.0; d]));
        put(ckpt, names::block(layer, "norm2.weight"), Tensor::vector(vec![1.0; d]));
        put(ckpt, names::block(layer, "norm2.bias"), Tensor::vector(vec![0.0; d]));
        put(
            ckpt,
            names::block(layer, "mlp.fc1.weight"),
            gaussian_matrix(d, hidden, fan_in(d), &mut rng).into(),
        );
        put(ckpt, names::block(layer, "mlp.fc1.bias"), Tensor::vector(vec![0.0; hidden]));
        put(
            ckpt,
            names::block(layer, "mlp.fc2.weight"),
            gaussian_matrix(hidden, d, fan_in(hidden), &mut rng).into(),
        );
        put(ckpt, names::block(layer, "mlp.fc2.bias"), Tensor::vector(vec![0.0; d]));
    }
    let mut rng = Rng::seed_from_u64(hash64(seed, STREAM_GLOBAL, 2));
    put(ckpt, names::NORM_WEIGHT.into(), Tensor::vector(vec![1.0; d]));
    put(ckpt, names::NORM_BIAS.into(), Tensor::vector(vec![0.0; d]));
    put(
        ckpt,
        names::HEAD_WEIGHT.into(),
        gaussian_matrix(d, arch.classes, DEFAULT_WEIGHT_STD, &mut rng).into(),
    );
    put(ckpt, names::HEAD_BIAS.into(), Tensor::vector(vec![0.0; arch.classes]));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).frobenius_norm() / b.frobenius_norm()
    }

    #[test]
    fn degenerate_qk_target_gives_identity_block() {
        let head = construct_qk_head(4, 2, 0.0, 1.0, &mut Rng::seed_from_u64(0)).unwrap();
        assert_eq!(head.product(), Matrix::from_diag(&[1.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn qk_rejects_bad_head_dim() {
        let mut rng = Rng::seed_from_u64(0);
        assert!(matches!(construct_qk_head(4, 5, 0.5, 0.5, &mut rng), Err(Error::Shape(_))));
        assert!(matches!(construct_qk_head(4, 0, 0.5, 0.5, &mut rng), Err(Error::Shape(_))));
        assert!(matches!(
            construct_qk_head(4, 2, -0.5, 0.5, &mut rng),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn zero_noise_vp_is_exact_negative_identity() {
        let vp = construct_vp(
            8,
            0.0,
            0.4,
            VpSign::Negative,
            VpFactorization::SymmetricSqrt,
            &mut Rng::seed_from_u64(1),
        )
        .unwrap();
        let expected = Matrix::identity(8).scale(-0.4);
        assert!(vp.product().sub(&expected).max_abs() < 1e-10);
    }

    #[test]
    fn vp_reconstructs_target_exactly() {
        let (d, alpha, beta, seed) = (64, 0.4, 0.4, 5);
        let vp = construct_vp(
            d,
            alpha,
            beta,
            VpSign::Negative,
            VpFactorization::SymmetricSqrt,
            &mut Rng::seed_from_u64(seed),
        )
        .unwrap();
        // Replay the same stream to rebuild the target independently.
        let mut rng = Rng::seed_from_u64(seed);
        let mut target = gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), &mut rng).scale(alpha);
        target.add_diag(-beta);
        assert!(rel_err(&vp.product(), &target) < 1e-8);
    }

    #[test]
    fn as_written_variant_gives_three_halves_power() {
        let mut rng = Rng::seed_from_u64(9);
        let vp = construct_vp(6, 0.5, 0.5, VpSign::Negative, VpFactorization::AsWritten, &mut rng).unwrap();
        let mut rng = Rng::seed_from_u64(9);
        let mut target = gaussian_matrix(6, 6, 1.0 / 6f64.sqrt(), &mut rng).scale(0.5);
        target.add_diag(-0.5);
        let s = svd(&target).unwrap();
        let s32: Vec<f64> = s.s.iter().map(|x| x.powf(1.5)).collect();
        let expected = s.u.scale_columns(&s32).matmul_t(&s.v);
        assert!(rel_err(&vp.product(), &expected) < 1e-10);
    }

    #[test]
    fn positive_sign_flips_diagonal() {
        for (sign, expected) in [(VpSign::Positive, 0.3), (VpSign::Negative, -0.3)] {
            let vp = construct_vp(16, 0.0, 0.3, sign, VpFactorization::SymmetricSqrt, &mut Rng::seed_from_u64(2))
                .unwrap();
            let diag = vp.product().trace() / 16.0;
            assert!((diag - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_constructions() {
        let mut rng = Rng::seed_from_u64(3);
        let qk = construct_equal_qk(8, 4, 0.0, &mut rng).unwrap();
        assert_eq!(qk.product(), Matrix::zeros(8, 8));
        let vp = construct_equal_vp(8, 0.0, VpSign::Negative, &mut rng).unwrap();
        assert_eq!(vp.product().max_abs(), 0.0);

        let vp = construct_equal_vp(8, 1.0, VpSign::Negative, &mut Rng::seed_from_u64(4)).unwrap();
        let zzt = vp.w_v.matmul_t(&vp.w_v);
        assert!(vp.product().add(&zzt).max_abs() < 1e-14);
    }

    #[test]
    fn estimator_trivial_cases() {
        let e = estimate_alpha_beta(&Matrix::identity(5), VpSign::Positive).unwrap();
        assert_eq!((e.alpha_hat, e.beta_hat), (0.0, 1.0));
        let e = estimate_alpha_beta(&Matrix::zeros(5, 5), VpSign::Negative).unwrap();
        assert_eq!((e.alpha_hat, e.beta_hat, e.diag_z_score), (0.0, 0.0, 0.0));
        let e = estimate_alpha_beta(&Matrix::identity(5).scale(-2.0), VpSign::Negative).unwrap();
        assert_eq!(e.beta_hat, 2.0);
        assert!(e.diag_z_score < 0.0);
        assert!(estimate_alpha_beta(&Matrix::zeros(1, 1), VpSign::Positive).is_err());
        assert!(estimate_alpha_beta(&Matrix::zeros(2, 3), VpSign::Positive).is_err());
    }

    #[test]
    fn origin_fit() {
        let f = fit_through_origin(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]);
        assert!((f.slope - 2.0).abs() < 1e-15);
        assert!((f.r_squared - 1.0).abs() < 1e-15);
        // A line with an intercept is penalized.
        let f = fit_through_origin(&[(1.0, 5.0), (2.0, 6.0), (3.0, 7.0)]);
        assert!(f.r_squared < 0.5);
    }

    #[test]
    fn sweep_rejects_mismatched_grid() {
        let mut rng = Rng::seed_from_u64(0);
        assert!(feasibility_sweep(Method::Svd, 8, 4, &SweepGrid::Scales(vec![1.0]), &mut rng).is_err());
        assert!(feasibility_sweep(Method::EqualMatrix, 8, 4, &SweepGrid::Scales(vec![]), &mut rng).is_err());
    }

    #[test]
    fn zero_point_sweep() {
        let rows = feasibility_sweep(
            Method::Svd,
            16,
            16,
            &SweepGrid::AlphaBeta(vec![(0.0, 0.0)]),
            &mut Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!((rows[0].alpha_hat, rows[0].beta_hat), (0.0, 0.0));
    }

    #[test]
    fn depth_zero_has_only_pos_embed() {
        let mut arch = ModelArch::toy();
        arch.depth = 0;
        let c = init_transformer(&arch, &InitSpec::vision(), 0, InitScope::Attention).unwrap();
        assert_eq!(c.tensors.keys().collect::<Vec<_>>(), vec!["pos_embed"]);
    }

    #[test]
    fn init_is_deterministic_and_heads_differ() {
        let arch = ModelArch::toy();
        let a = init_transformer(&arch, &InitSpec::vision(), 9, InitScope::Full).unwrap();
        let b = init_transformer(&arch, &InitSpec::vision(), 9, InitScope::Full).unwrap();
        assert!(a.bitwise_eq(&b));
        let h0 = HeadFactors {
            w_q: a.matrix(&names::q_head(0, 0)).unwrap(),
            w_k: a.matrix(&names::k_head(0, 0)).unwrap(),
        };
        let h1 = HeadFactors {
            w_q: a.matrix(&names::q_head(0, 1)).unwrap(),
            w_k: a.matrix(&names::k_head(0, 1)).unwrap(),
        };
        assert!(h0.product().sub(&h1.product()).frobenius_norm() > 0.1);
        assert!(a.metadata["default_initialized"].contains("mlp.fc1.weight"));
    }

    #[test]
    fn head_slices_recompose_full_vp_product() {
        let arch = ModelArch::toy();
        let c = init_transformer(&arch, &InitSpec::vision(), 1, InitScope::Attention).unwrap();
        let (w_v, w_proj) = (c.matrix(&names::v(0)).unwrap(), c.matrix(&names::proj(0)).unwrap());
        let k = arch.head_dim();
        let mut sum = Matrix::zeros(arch.d, arch.d);
        for h in 0..arch.heads {
            let part = w_v.columns(h * k..(h + 1) * k).matmul(&w_proj.rows_range(h * k..(h + 1) * k));
            sum.axpy(1.0, &part);
        }
        assert!(sum.sub(&w_v.matmul(&w_proj)).max_abs() < 1e-12);
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = InitSpec {
            alpha_qk: 1.5,
            ..InitSpec::vision()
        };
        assert!(matches!(
            init_transformer(&ModelArch::toy(), &spec, 0, InitScope::Attention),
            Err(Error::InvalidParameter(_))
        ));
    }
}
