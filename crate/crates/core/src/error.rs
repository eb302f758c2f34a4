use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("SVD did not converge after {sweeps} sweeps")]
    NonConvergence { sweeps: usize },

    #[error("conv-bias attention variant requires a conv bias matrix")]
    MissingConvBias,

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("overlapping or non-contiguous data offsets: {0}")]
    OffsetOverlap(String),

    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::NonFinite(_) | Error::Divergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
