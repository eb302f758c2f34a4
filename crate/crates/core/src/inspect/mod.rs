//! Checkpoint container, tensor naming and diagonal-structure analysis.

mod analysis;
mod container;
mod heatmap;
pub mod names;

pub use analysis::{
    classify, load_attention, product_analysis, vp_head_slice, HeadReport, LayerReport, LayerWeights, ProductReport,
    SignPattern, SIGN_THRESHOLD,
};
pub use container::{Checkpoint, Tensor};
pub use heatmap::{export_heatmap, format_g17, HeatmapFiles};
