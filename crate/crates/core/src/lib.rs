//! Universal semi-supervised domain adaptation over precomputed feature vectors.
//!
//! The crate covers the whole experimental loop:
//!
//! - [`datagen`]: seeded synthetic source/target domains with covariate shift,
//!   label-space settings (closed, open, partial, open-partial) and k-shot splits.
//! - [`model`]: masked softmax classification heads, exact gradients, SGD with momentum.
//! - [`pgpr`]: prior-guided pseudo-label refinement (group reweighting followed by
//!   classifier aggregation) and the adaptive confidence threshold.
//! - [`train`]: the dual-head training loop for S+T, naive pseudo-labeling and PGPR.
//! - [`eval`]: accuracy decomposition by class group and common-class bias diagnostics.
//! - [`cli`]: the experiment runner behind the `unissda` binary.

// `!(x > 0.0)` style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;
pub mod pgpr;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
