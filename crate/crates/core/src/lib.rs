//! Structured initialization of self-attention weights, tools to inspect
//! trained checkpoints for the same structure, and a small CPU transformer
//! trainer for controlled comparisons.

pub mod arch;
pub mod attention;
pub mod error;
pub mod inspect;
pub mod linalg;
pub mod mimetic;
pub mod posembed;
pub mod toytrain;

pub use arch::ModelArch;
pub use error::{Error, Result};
pub use linalg::{Matrix, Rng};
pub use mimetic::{InitScope, InitSpec, Method, VpFactorization, VpSign};
pub use posembed::PosEmbedKind;
