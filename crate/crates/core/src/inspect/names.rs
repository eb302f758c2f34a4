//! Tensor naming scheme shared by the writer, the loader and the trainer.

pub const POS_EMBED: &str = "pos_embed";
pub const CLS_TOKEN: &str = "cls_token";
pub const PATCH_WEIGHT: &str = "patch_embed.weight";
pub const PATCH_BIAS: &str = "patch_embed.bias";
pub const NORM_WEIGHT: &str = "norm.weight";
pub const NORM_BIAS: &str = "norm.bias";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

pub fn q_head(layer: usize, head: usize) -> String {
    format!("blocks.{layer}.attn.q.h{head}.weight")
}

pub fn k_head(layer: usize, head: usize) -> String {
    format!("blocks.{layer}.attn.k.h{head}.weight")
}

/// Full-width `d × d` query weight (heads concatenated along columns).
pub fn q_full(layer: usize) -> String {
    format!("blocks.{layer}.attn.q.weight")
}

pub fn k_full(layer: usize) -> String {
    format!("blocks.{layer}.attn.k.weight")
}

pub fn v(layer: usize) -> String {
    format!("blocks.{layer}.attn.v.weight")
}

pub fn proj(layer: usize) -> String {
    format!("blocks.{layer}.attn.proj.weight")
}

/// Any other per-block tensor, e.g. `block(2, "mlp.fc1.weight")`.
pub fn block(layer: usize, suffix: &str) -> String {
    format!("blocks.{layer}.{suffix}")
}
