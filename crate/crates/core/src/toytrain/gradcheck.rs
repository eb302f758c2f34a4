use serde::Serialize;

use super::model::ToyModel;
use super::InitMode;
use crate::arch::ModelArch;
use crate::attention::{AttentionConfig, SkipMode, Variant};
use crate::mimetic::InitSpec;
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, hash64, Matrix, Rng};

/// Lower bound on the number of checked coordinates.
pub const MIN_COORDS: usize = 200;

const CHECK_BATCH: usize = 8;

/// Std of the Gaussian noise added to every parameter before checking.
/// At the raw init many paths carry gradients near 1e-8, where the
/// roundoff of an O(1) loss differenced at eps = 1e-5 (about 1e-11)
/// already exceeds the tolerance; the jitter moves the check to a
/// generic point and also exercises biases and gains away from 0 and 1.
const CHECK_JITTER: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor holding the worst coordinate.
    pub worst: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords: usize,
    pub tensors: usize,
}

/// Central-difference check of every tensor of a freshly initialized model,
/// jittered by [`CHECK_JITTER`], on random inputs and labels.
pub fn grad_check(arch: &ModelArch, mode: InitMode, seed: u64, eps: f64) -> Result<GradCheckReport> {
    grad_check_on(&ToyModel::new(arch, mode, seed)?, seed, eps)
}

/// [`grad_check`] for an arbitrary variant and skip mode.
pub fn grad_check_config(
    arch: &ModelArch,
    spec: &InitSpec,
    variant: Variant,
    skip: SkipMode,
    seed: u64,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut cfg = AttentionConfig::new(arch.d, arch.heads);
    cfg.variant = variant;
    cfg.skip = skip;
    grad_check_on(&ToyModel::with_spec(arch, spec, &cfg, seed)?, seed, eps)
}

fn grad_check_on(model: &ToyModel, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let arch = &model.arch;
    let mut rng = Rng::seed_from_u64(hash64(seed, 0x6772_6164, 0));
    let mut model = model.clone();
    for t in model.params.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += CHECK_JITTER * rng.next_gaussian());
    }
    let pixels = gaussian_matrix(CHECK_BATCH, arch.n_tokens * arch.patch_dim, 1.0, &mut rng);
    let labels: Vec<usize> = (0..CHECK_BATCH).map(|_| rng.below(arch.classes)).collect();
    grad_check_model(&model, &pixels, &labels, eps, MIN_COORDS, &mut rng)
}

/// Compares analytic gradients with `(L(θ + ε) − L(θ − ε)) / 2ε` on at
/// least `min_coords` coordinates drawn from every tensor, and returns
/// the largest `|g_a − g_n| / max(|g_a|, |g_n|, 1e-8)`.
pub fn grad_check_model(
    model: &ToyModel,
    pixels: &Matrix,
    labels: &[usize],
    eps: f64,
    min_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidParameter(format!("eps {eps} is outside [1e-6, 1e-3]")));
    }
    let analytic = model.loss_and_grad(pixels, labels)?;
    if !analytic.loss.is_finite() || !analytic.grads.is_finite() {
        return Err(Error::NonFinite("loss or gradient at the check point".into()));
    }
    let grads = analytic.grads.tensors();
    let per_tensor = min_coords.div_ceil(grads.len()).max(8);

    // Up to `per_tensor` coordinates from every tensor, then a random
    // top-up from the rest until `min_coords` is reached.
    let mut chosen = Vec::new();
    let mut spare = Vec::new();
    for (ti, g) in grads.iter().enumerate() {
        let mut idx: Vec<usize> = (0..g.data.len()).collect();
        rng.shuffle(&mut idx);
        let rest = idx.split_off(per_tensor.min(idx.len()));
        chosen.extend(idx.into_iter().map(|j| (ti, j)));
        spare.extend(rest.into_iter().map(|j| (ti, j)));
    }
    rng.shuffle(&mut spare);
    let missing = min_coords.saturating_sub(chosen.len());
    chosen.extend(spare.into_iter().take(missing));
    chosen.sort_unstable();

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords: 0,
        tensors: grads.len(),
    };
    for (ti, j) in chosen {
        let g = &grads[ti];
        let original = probe.params.tensors()[ti].data[j];
        let mut eval = |value: f64| -> Result<f64> {
            probe.params.tensors_mut()[ti].data[j] = value;
            probe.loss(pixels, labels)
        };
        let plus = eval(original + eps)?;
        let minus = eval(original - eps)?;
        probe.params.tensors_mut()[ti].data[j] = original;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!("loss while perturbing {}", g.name)));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = g.data[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if report.worst.is_empty() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = format!("{}[{j}]", g.name);
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
        report.coords += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_mode_passes_on_tiny_arch() {
        for mode in InitMode::ALL {
            let r = grad_check(&ModelArch::tiny(), mode, 3, 1e-5).unwrap();
            assert!(r.coords >= MIN_COORDS);
            assert!(r.max_rel_error < 1e-4, "{mode}: {r:?}");
        }
    }

    #[test]
    fn two_blocks_with_and_without_class_token() {
        for class_token in [true, false] {
            let arch = ModelArch {
                depth: 2,
                class_token,
                ..ModelArch::tiny()
            };
            for mode in [InitMode::Mimetic, InitMode::LayerscaleLeft, InitMode::ConvInside] {
                let r = grad_check(&arch, mode, 1, 1e-5).unwrap();
                assert!(r.max_rel_error < 1e-4, "{mode} class_token={class_token}: {r:?}");
            }
        }
    }

    #[test]
    fn zero_attention_logits_have_zero_gradients() {
        let arch = ModelArch::tiny();
        let mut model = ToyModel::new(&arch, InitMode::Default, 0).unwrap();
        for b in &mut model.params.blocks {
            b.attn.wq.fill(0.0);
            b.attn.wk.fill(0.0);
        }
        let mut rng = Rng::seed_from_u64(1);
        let pixels = gaussian_matrix(2, arch.n_tokens, 1.0, &mut rng);
        let out = model.loss_and_grad(&pixels, &[0, 2]).unwrap();
        assert_eq!(out.grads.blocks[0].attn.wq.max_abs(), 0.0);
        assert_eq!(out.grads.blocks[0].attn.wk.max_abs(), 0.0);
        let r = grad_check_model(&model, &pixels, &[0, 2], 1e-5, MIN_COORDS, &mut rng).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn eps_range_enforced() {
        assert!(matches!(
            grad_check(&ModelArch::tiny(), InitMode::Default, 0, 1e-2),
            Err(Error::InvalidParameter(_))
        ));
    }
}
