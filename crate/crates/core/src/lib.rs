//! Anchor-free group activity detection over precomputed temporal features.
//!
//! The pipeline is: [`datamodel`] feature files and manifests, a small
//! convolutional backbone followed by parameter-free max/avg pooling
//! pyramids ([`network`]), per-moment classification and boundary regression
//! heads trained with an IoU-weighted focal loss plus a temporal DIoU loss
//! ([`assign_loss`]), and Soft-NMS decoding ([`decode`]). [`metrics`] holds the
//! tIoU/AP/FPR evaluation, [`synthgen`] a seeded surrogate dataset generator
//! and [`trainer`] the optimisation loop, ablation harness and benchmark.

pub mod assign_loss;
#[cfg(feature = "cli")]
pub mod cli;
pub mod datamodel;
pub mod decode;
mod error;
pub mod metrics;
pub mod network;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
