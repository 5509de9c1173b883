//! Learnable simplex noise-transition matrices (SimT) for training
//! classifiers on pseudo labels that carry both closed-set and open-set
//! noise.
//!
//! Module map:
//! - [`linalg`]: dense matrices, Gram log-volume and its gradient, the
//!   finite-difference oracle.
//! - [`simt`]: SimT and weighting-matrix parameterizations, the volume,
//!   anchor and convex regularizers.
//! - [`model`]: the classifier, corrected and auxiliary losses, anchor
//!   detection and confident-instance selection.
//! - [`synth`]: noisy-label generator with a known transition matrix and
//!   the oracles used to score estimates.
//! - [`train`]: warm-up, classifier extension, the alternating training
//!   step, evaluation.
//! - [`gradcheck`]: finite-difference certification of every loss term.
//! - [`format`]: CSV, JSON Lines and JSON file formats.

pub mod error;
pub mod format;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod simt;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Matrix;
