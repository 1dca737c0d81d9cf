//! Dense `f64` kernel: matrices, row-wise primitives, AdamW and randomness.

mod adamw;
mod matrix;
pub mod ops;
mod rng;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use matrix::Matrix;
pub(crate) use matrix::{gemm_acc, gemm_tn_acc};
pub use ops::{cross_entropy_masked, layernorm, softmax_rows};
pub use rng::RandomSource;
