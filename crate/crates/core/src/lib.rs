//! Person re-identification with bag-of-visual-words descriptors whose
//! codebooks are clustered under a supervised Mahalanobis metric.
//!
//! The pipeline: images are segmented into superpixels ([`slic`]), four
//! appearance features are extracted per superpixel ([`features`]), a KISSME
//! metric is learned from strip-constrained cross-camera pairs ([`metric`]),
//! visual words are clustered under that metric ([`codebook`]), per-strip TF
//! histograms are fused into an image descriptor ([`descriptor`]),
//! descriptors are compared either directly or through a second-stage
//! learner ([`subspace`]), and identities are ranked and evaluated with CMC
//! and mAP ([`eval`]). Dataset ingestion and the synthetic two-camera
//! benchmark generator live in [`imgio`].

pub mod codebook;
pub mod color;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod imgio;
pub mod metric;
pub mod slic;
pub mod subspace;

mod binfmt;
mod linalg;

pub use error::{Error, ErrorClass, Result};
