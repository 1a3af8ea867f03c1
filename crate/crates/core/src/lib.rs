//! Fairness-aware conformal classification over fixed image embeddings.
//!
//! A halving-width MLP head is trained on embeddings with an F1-regulated
//! class sampler, split-conformal prediction sets are built on held-out
//! calibration data, and the sets are audited per demographic subgroup.

pub mod conformal;
pub mod data_model;
pub mod error;
pub mod fairness;
pub mod matrix;
pub mod mlp;
pub mod pipeline;
pub mod sampler;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
