//! Deterministic numerical substrate: dense matrices, a seedable PRNG with
//! Gaussian sampling, and a one-sided Jacobi SVD.

mod matrix;
mod rng;
mod svd;
pub mod vmath;

pub use matrix::{gemm_block, Block, Matrix};
pub use rng::{gaussian_matrix, hash64, Rng};
pub use svd::{svd, SvdResult, SVD_MAX_SWEEPS, SVD_TOLERANCE};
