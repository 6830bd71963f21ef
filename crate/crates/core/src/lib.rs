//! Semi-supervised line segment detection.
//!
//! The pipeline: segments are over-parameterized as tri-points (center plus
//! two endpoint displacements) and as chains of overlapping sub-segments,
//! encoded into a 16-channel target map at 1/4 input resolution, regressed by
//! a small fully-convolutional network, and decoded back to scored segments.
//! Unlabeled images contribute through a confidence-gated consistency loss
//! between weakly and strongly augmented views, optionally mixed across
//! samples along a single axis cut.
//!
//! Module map:
//! - [`geometry`]: segments, tri-points, sub-segment chains, transforms,
//!   rasterization.
//! - [`encoding`]: ground-truth map encoding, decoding, segment matching.
//! - [`losses`]: supervised map losses and the consistency loss.
//! - [`augment`]: labeled augmentation, weak/strong views, axis-split mixing.
//! - [`data`]: manifests, splits, synthetic data, mask-to-segment extraction.
//! - [`metrics`]: structural average precision and heatmap F score.
//! - [`nn`]: the convolutional backbone and optimizer.
//! - [`train`]: supervised and semi-supervised loops, checkpoints, eval.
//! - [`oracle`]: ground-truth-backed predictor for pipeline self-checks.

pub mod augment;
pub mod data;
pub mod encoding;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
