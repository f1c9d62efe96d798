//! Multi-source soft pseudo-label fusion for semantic segmentation domain
//! adaptation.
//!
//! Source models' per-pixel predictions on a target image are scored by
//! normalized prediction entropy, converted into the target label space,
//! and fused into soft pseudo-labels. A small two-branch per-pixel
//! classifier is then trained on those labels with a symmetric
//! cross-entropy loss that is weighted by label entropy, rectified by the
//! divergence between its two branches, and denoised online with class
//! prototypes.
//!
//! Hot per-pixel loops run on rayon when the `parallel` feature is on
//! (the default) and fall back to plain iterators otherwise. Every
//! reduction is performed in a fixed order, so results are bit-identical
//! in both modes and for any thread count.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod fusion;
pub mod gap;
pub mod io;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod prototypes;
pub mod synth;
pub mod tensor;
pub mod workflow;

pub use error::{Error, Result};
pub use tensor::{HardLabelMap, ProbabilityMap, Tensor3, IGNORE_LABEL};
