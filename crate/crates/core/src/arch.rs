//! Model shape shared by weight construction, checkpoints and the trainer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pre-norm vision transformer shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    /// Patch tokens, not counting the class token.
    pub n_tokens: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub class_token: bool,
    /// Input features per token (patch area × channels).
    pub patch_dim: usize,
}

impl ModelArch {
    /// Width 192, depth 12, 3 heads; 2×2 patches of 32×32 RGB inputs.
    pub fn vit_tiny_cifar() -> Self {
        Self {
            d: 192,
            depth: 12,
            heads: 3,
            n_tokens: 256,
            mlp_ratio: 4.0,
            classes: 10,
            class_token: true,
            patch_dim: 12,
        }
    }

    /// ViT-Tiny with 16×16 patches of 224×224 RGB inputs.
    pub fn vit_tiny_imagenet() -> Self {
        Self {
            d: 192,
            depth: 12,
            heads: 3,
            n_tokens: 196,
            mlp_ratio: 4.0,
            classes: 1000,
            class_token: true,
            patch_dim: 768,
        }
    }

    /// Width 384, 12 layers, 8 heads; sequence length 128, no class token.
    pub fn language() -> Self {
        Self {
            d: 384,
            depth: 12,
            heads: 8,
            n_tokens: 128,
            mlp_ratio: 4.0,
            classes: 10000,
            class_token: false,
            patch_dim: 384,
        }
    }

    /// Default desk-scale classifier: 8×8 grid, one pixel per token.
    pub fn toy() -> Self {
        Self {
            d: 64,
            depth: 4,
            heads: 4,
            n_tokens: 64,
            mlp_ratio: 2.0,
            classes: 3,
            class_token: true,
            patch_dim: 1,
        }
    }

    /// Small shape used for gradient checks (4×4 grid).
    pub fn tiny() -> Self {
        Self {
            d: 16,
            depth: 1,
            heads: 2,
            n_tokens: 16,
            mlp_ratio: 2.0,
            classes: 3,
            class_token: true,
            patch_dim: 1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn total_tokens(&self) -> usize {
        self.n_tokens + usize::from(self.class_token)
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.d as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Side of the square token grid, if `n_tokens` is a perfect square.
    pub fn grid_side(&self) -> Option<usize> {
        let s = (self.n_tokens as f64).sqrt().round() as usize;
        (s * s == self.n_tokens).then_some(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Shape(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.n_tokens == 0 || self.patch_dim == 0 || self.classes == 0 {
            return Err(Error::Shape(
                "n_tokens, patch_dim and classes must be positive".into(),
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(Error::Shape(format!("invalid mlp_ratio {}", self.mlp_ratio)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for arch in [
            ModelArch::vit_tiny_cifar(),
            ModelArch::vit_tiny_imagenet(),
            ModelArch::language(),
            ModelArch::toy(),
            ModelArch::tiny(),
        ] {
            arch.validate().unwrap();
        }
        assert_eq!(ModelArch::vit_tiny_cifar().head_dim(), 64);
        assert_eq!(ModelArch::toy().total_tokens(), 65);
        assert_eq!(ModelArch::toy().grid_side(), Some(8));
    }

    #[test]
    fn indivisible_width_rejected() {
        let mut arch = ModelArch::toy();
        arch.heads = 3;
        assert!(matches!(arch.validate(), Err(Error::Shape(_))));
    }
}
