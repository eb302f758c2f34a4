//! Desk-scale transformer classifier used to compare initializations under
//! identical data, batches and optimizer settings.

mod data;
mod gradcheck;
mod layers;
mod model;
mod optim;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{SkipMode, Variant};
use crate::error::{Error, Result};
use crate::mimetic::{InitSpec, VpSign};

pub use data::{gen_dataset, sample, Dataset, ShapeClass, Split, ToyDatasetSpec, CLASSES, GRID};
pub use gradcheck::{grad_check, grad_check_config, grad_check_model, GradCheckReport, MIN_COORDS};
pub use layers::{
    cross_entropy, gelu_backward, gelu_forward, layer_norm_backward, layer_norm_forward, LayerNormCache,
    LAYER_NORM_EPS,
};
pub use model::{BlockParams, ForwardCache, LossGrad, ParamSlice, ParamSliceMut, Params, ToyModel};
pub use optim::{AdamW, AdamWConfig};
pub use train::{run_many, train_toy, ToyRunMetrics, TrainConfig};

/// Initialization and architecture variant of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `N(0, 0.02²)` attention weights and random position embeddings.
    Default,
    /// Vision preset with sinusoidal embeddings at scale 2.
    Mimetic,
    /// As [`InitMode::Mimetic`] with a positive value/projection diagonal.
    MimeticPositiveVp,
    /// Mimetic query/key, default value/projection, `X + A·diag(ls)` skip.
    LayerscaleRight,
    /// Mimetic query/key, default value/projection, `X·diag(1 − ls) + A` skip.
    LayerscaleLeft,
    /// Default weights, convolution bias inside the softmax.
    ConvInside,
    /// Default weights, convolution bias added after the softmax.
    ConvOutside,
    /// Default weights, softmaxed convolution bias added after the softmax.
    ConvOutsideSoftmaxed,
}

impl InitMode {
    pub const ALL: [InitMode; 8] = [
        InitMode::Default,
        InitMode::Mimetic,
        InitMode::MimeticPositiveVp,
        InitMode::LayerscaleRight,
        InitMode::LayerscaleLeft,
        InitMode::ConvInside,
        InitMode::ConvOutside,
        InitMode::ConvOutsideSoftmaxed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Default => "default",
            InitMode::Mimetic => "mimetic",
            InitMode::MimeticPositiveVp => "mimetic_positive_vp",
            InitMode::LayerscaleRight => "layerscale_right",
            InitMode::LayerscaleLeft => "layerscale_left",
            InitMode::ConvInside => "conv_inside",
            InitMode::ConvOutside => "conv_outside",
            InitMode::ConvOutsideSoftmaxed => "conv_outside_softmaxed",
        }
    }

    pub fn init_spec(self) -> InitSpec {
        match self {
            InitMode::Default | InitMode::ConvInside | InitMode::ConvOutside | InitMode::ConvOutsideSoftmaxed => {
                InitSpec::baseline()
            }
            InitMode::Mimetic => InitSpec::vision(),
            InitMode::MimeticPositiveVp => InitSpec {
                vp_sign: VpSign::Positive,
                ..InitSpec::vision()
            },
            InitMode::LayerscaleRight | InitMode::LayerscaleLeft => InitSpec {
                mimic_vp: false,
                ..InitSpec::vision()
            },
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            InitMode::ConvInside => Variant::ConvInside,
            InitMode::ConvOutside => Variant::ConvOutside,
            InitMode::ConvOutsideSoftmaxed => Variant::ConvOutsideSoftmaxed,
            _ => Variant::Vanilla,
        }
    }

    pub fn skip(self) -> SkipMode {
        match self {
            InitMode::LayerscaleRight => SkipMode::LayerscaleRight,
            InitMode::LayerscaleLeft => SkipMode::LayerscaleLeft,
            _ => SkipMode::Plain,
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        InitMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown init mode '{s}'")))
    }
}
