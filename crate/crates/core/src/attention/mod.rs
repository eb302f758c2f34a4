//! Attention maps, the expected-logit prediction, convolution-bias variants
//! and LayerScale-style skip connections.

mod conv;
mod layer;
mod maps;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::{abs_kernel, conv_bias_matrix, difference_kernel, ConvBias};
pub use layer::{
    add_leading_rows, leading_rows, mhsa_forward, skip_backward, skip_forward, AttentionCache, AttentionGrads,
    AttentionLayer, AttentionWeights, MhsaWeights,
};
pub use maps::{
    attention_map, diagonal_mass, expected_logits, mc_logit_mean, softmax_backward_rows, softmax_rows, McLogits,
};

/// How an optional convolution bias `C` enters each head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `softmax(S)`.
    Vanilla,
    /// `softmax(S + g·C)`.
    ConvInside,
    /// `softmax(S) + g·C`.
    ConvOutside,
    /// `softmax(S) + softmax(g·C)`; every mixing weight is positive.
    ConvOutsideSoftmaxed,
}

/// How the attention branch is added to the residual stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// `X + A`.
    Plain,
    /// `X + A·diag(ls)`.
    LayerscaleRight,
    /// `X·diag(1 − ls) + A`.
    LayerscaleLeft,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Vanilla,
        Variant::ConvInside,
        Variant::ConvOutside,
        Variant::ConvOutsideSoftmaxed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::ConvInside => "conv_inside",
            Variant::ConvOutside => "conv_outside",
            Variant::ConvOutsideSoftmaxed => "conv_outside_softmaxed",
        }
    }

    pub fn uses_conv(self) -> bool {
        self != Variant::Vanilla
    }
}

impl SkipMode {
    pub const ALL: [SkipMode; 3] = [SkipMode::Plain, SkipMode::LayerscaleRight, SkipMode::LayerscaleLeft];

    pub fn as_str(self) -> &'static str {
        match self {
            SkipMode::Plain => "plain",
            SkipMode::LayerscaleRight => "layerscale_right",
            SkipMode::LayerscaleLeft => "layerscale_left",
        }
    }

    pub fn uses_scale(self) -> bool {
        self != SkipMode::Plain
    }
}

macro_rules! str_enum {
    ($ty:ty, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let norm = s.replace('-', "_");
                <$ty>::ALL
                    .into_iter()
                    .find(|v| v.as_str() == norm)
                    .ok_or_else(|| Error::InvalidParameter(format!("unknown {} '{s}'", $what)))
            }
        }
    };
}

str_enum!(Variant, "attention variant");
str_enum!(SkipMode, "skip mode");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d: usize,
    pub heads: usize,
    pub variant: Variant,
    pub skip: SkipMode,
    /// Initial value of the learnable convolution gate `g`.
    pub conv_gate: f64,
    /// Initial value of every LayerScale diagonal entry.
    pub layerscale_init: f64,
}

impl AttentionConfig {
    pub fn new(d: usize, heads: usize) -> Self {
        Self {
            d,
            heads,
            variant: Variant::Vanilla,
            skip: SkipMode::Plain,
            conv_gate: 1.0,
            layerscale_init: 0.4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Shape(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}
