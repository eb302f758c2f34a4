use serde::{Deserialize, Serialize};

use super::{names, Checkpoint};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mimetic::{estimate_alpha_beta, AlphaBetaEstimate, HeadFactors, VpFactors, VpSign};

/// A diagonal z-score beyond this magnitude counts as prominent.
pub const SIGN_THRESHOLD: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignPattern {
    /// Positive query/key diagonal and negative value/projection diagonal.
    VisionLike,
    /// Both signs reversed.
    LanguageLike,
    Indeterminate,
}

pub fn classify(qk_z: f64, vp_z: f64) -> SignPattern {
    if qk_z > SIGN_THRESHOLD && vp_z < -SIGN_THRESHOLD {
        SignPattern::VisionLike
    } else if qk_z < -SIGN_THRESHOLD && vp_z > SIGN_THRESHOLD {
        SignPattern::LanguageLike
    } else {
        SignPattern::Indeterminate
    }
}

/// Attention weights of one layer in per-head form.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadFactors>,
    pub vp: VpFactors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub head: usize,
    /// Estimate of `W_Q·W_Kᵀ` read as `α·Z + β·I`.
    pub qk: AlphaBetaEstimate,
    /// This head's slice `W_V[:, h] · W_proj[h, :]`, read as `α·Z − β·I`.
    pub vp_slice: AlphaBetaEstimate,
    /// From this head's query/key z-score and the layer's head-summed
    /// value/projection z-score.
    pub sign_pattern: SignPattern,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    /// Head-summed `W_V·W_proj`, read as `α·Z − β·I`.
    pub vp: AlphaBetaEstimate,
    pub heads: Vec<HeadReport>,
    /// Shared by all heads, otherwise indeterminate.
    pub sign_pattern: SignPattern,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductReport {
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub layers: Vec<LayerReport>,
}

impl ProductReport {
    pub fn count(&self, pattern: SignPattern) -> usize {
        self.layers.iter().filter(|l| l.sign_pattern == pattern).count()
    }
}

fn infer_depth(ckpt: &Checkpoint) -> usize {
    if let Ok(depth) = ckpt.meta_usize("depth") {
        return depth;
    }
    (0..).take_while(|&l| ckpt.contains(&names::v(l))).count()
}

fn infer_heads(ckpt: &Checkpoint) -> Result<usize> {
    if let Ok(heads) = ckpt.meta_usize("heads") {
        return Ok(heads);
    }
    let per_head = (0..).take_while(|&h| ckpt.contains(&names::q_head(0, h))).count();
    if per_head > 0 {
        Ok(per_head)
    } else {
        Err(Error::MissingTensor("heads (metadata needed for full-width q/k)".into()))
    }
}

/// Reads every layer's attention weights, splitting full-width `d × d`
/// query/key matrices into per-head column blocks when needed.
pub fn load_attention(ckpt: &Checkpoint) -> Result<Vec<LayerWeights>> {
    let depth = infer_depth(ckpt);
    if depth == 0 {
        return Ok(Vec::new());
    }
    let heads = infer_heads(ckpt)?;
    let mut layers = Vec::with_capacity(depth);
    for layer in 0..depth {
        let w_v = ckpt.matrix(&names::v(layer))?;
        let w_proj = ckpt.matrix(&names::proj(layer))?;
        let d = w_v.rows();
        if heads == 0 || d % heads != 0 || w_v.shape() != (d, d) || w_proj.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "layer {layer}: value/projection must be square and divisible into {heads} heads"
            )));
        }
        let k = d / heads;
        let factors = if ckpt.contains(&names::q_head(layer, 0)) {
            (0..heads)
                .map(|h| {
                    Ok(HeadFactors {
                        w_q: ckpt.matrix(&names::q_head(layer, h))?,
                        w_k: ckpt.matrix(&names::k_head(layer, h))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            let q = ckpt.matrix(&names::q_full(layer))?;
            let kk = ckpt.matrix(&names::k_full(layer))?;
            if q.shape() != (d, d) || kk.shape() != (d, d) {
                return Err(Error::Shape(format!("layer {layer}: full-width q/k must be {d}x{d}")));
            }
            (0..heads)
                .map(|h| HeadFactors {
                    w_q: q.columns(h * k..(h + 1) * k),
                    w_k: kk.columns(h * k..(h + 1) * k),
                })
                .collect()
        };
        for (h, f) in factors.iter().enumerate() {
            if f.w_q.shape() != (d, k) || f.w_k.shape() != (d, k) {
                return Err(Error::Shape(format!("layer {layer} head {h}: factors must be {d}x{k}")));
            }
        }
        layers.push(LayerWeights {
            heads: factors,
            vp: VpFactors { w_v, w_proj },
        });
    }
    Ok(layers)
}

/// Per-head value/projection slice `W_V[:, hk..(h+1)k] · W_proj[hk..(h+1)k, :]`.
pub fn vp_head_slice(vp: &VpFactors, head: usize, k: usize) -> Matrix {
    let range = head * k..(head + 1) * k;
    vp.w_v.columns(range.clone()).matmul(&vp.w_proj.rows_range(range))
}

/// Diagonal statistics of every query/key and value/projection product.
pub fn product_analysis(ckpt: &Checkpoint) -> Result<ProductReport> {
    let layers = load_attention(ckpt)?;
    let (d, heads) = match layers.first() {
        Some(l) => (l.vp.w_v.rows(), l.heads.len()),
        None => (
            ckpt.meta_usize("d").unwrap_or(0),
            ckpt.meta_usize("heads").unwrap_or(0),
        ),
    };
    let mut reports = Vec::with_capacity(layers.len());
    for (layer, lw) in layers.iter().enumerate() {
        let k = d / heads;
        let vp = estimate_alpha_beta(&lw.vp.product(), VpSign::Negative)?;
        let mut head_reports = Vec::with_capacity(heads);
        for (h, f) in lw.heads.iter().enumerate() {
            let qk = estimate_alpha_beta(&f.product(), VpSign::Positive)?;
            let vp_slice = estimate_alpha_beta(&vp_head_slice(&lw.vp, h, k), VpSign::Negative)?;
            head_reports.push(HeadReport {
                head: h,
                qk,
                vp_slice,
                sign_pattern: classify(qk.diag_z_score, vp.diag_z_score),
            });
        }
        let first = head_reports[0].sign_pattern;
        let sign_pattern = if head_reports.iter().all(|h| h.sign_pattern == first) {
            first
        } else {
            SignPattern::Indeterminate
        };
        reports.push(LayerReport {
            layer,
            vp,
            heads: head_reports,
            sign_pattern,
        });
    }
    Ok(ProductReport {
        d,
        depth: reports.len(),
        heads,
        layers: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ModelArch;
    use crate::mimetic::{init_transformer, InitScope, InitSpec};

    #[test]
    fn classification_table() {
        assert_eq!(classify(5.0, -5.0), SignPattern::VisionLike);
        assert_eq!(classify(-5.0, 5.0), SignPattern::LanguageLike);
        assert_eq!(classify(5.0, 5.0), SignPattern::Indeterminate);
        assert_eq!(classify(2.0, -3.0), SignPattern::Indeterminate);
    }

    #[test]
    fn zero_weights_are_indeterminate() {
        let arch = ModelArch::tiny();
        let mut ckpt = init_transformer(&arch, &InitSpec::vision(), 0, InitScope::Attention).unwrap();
        for t in ckpt.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let report = product_analysis(&ckpt).unwrap();
        for layer in &report.layers {
            assert_eq!(layer.sign_pattern, SignPattern::Indeterminate);
            assert_eq!((layer.vp.alpha_hat, layer.vp.beta_hat), (0.0, 0.0));
            for h in &layer.heads {
                assert_eq!((h.qk.alpha_hat, h.qk.beta_hat), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn missing_projection_is_reported() {
        let arch = ModelArch::tiny();
        let mut ckpt = init_transformer(&arch, &InitSpec::vision(), 0, InitScope::Attention).unwrap();
        ckpt.tensors.remove(&names::proj(0));
        assert!(matches!(product_analysis(&ckpt), Err(Error::MissingTensor(_))));
    }
}
