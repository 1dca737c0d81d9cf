//! Training and interpretability toolkit for a one-layer attention-only
//! transformer that learns to sort lists of integers.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkernel`]: dense `f64` matrices, the primitive ops used by the model,
//!   AdamW and a counter-based random source.
//! - [`datagen`]: list datasets with controlled gap (δ) statistics.
//! - [`model`]: the transformer itself, its exact gradients and checkpoints.
//! - [`trainer`]: the training loop, evaluation and the metrics log.
//! - [`circuits`], [`regions`], [`specialization`]: token-basis OV/QK
//!   analysis, active QK regions, head specialization, ablation and entropy.
//! - [`llc`]: local learning coefficient estimation with SGLD.

pub mod circuits;
pub mod datagen;
pub mod error;
pub mod llc;
pub mod model;
pub mod numkernel;
pub mod regions;
pub mod specialization;
pub mod trainer;

pub use error::{Error, Result};
