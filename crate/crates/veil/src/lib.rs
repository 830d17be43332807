//! Protect images against unauthorized facial-recognition training.
//!
//! The library perturbs ("cloaks") a user's images so that recognition
//! models trained on the perturbed copies misclassify clean images of the
//! same person, and ships a full tracker simulation to measure how well
//! the protection holds up, including countermeasures the tracker might
//! deploy.
//!
//! Module map:
//! - [`imaging`]: pixel primitives — perceptual distance (DSSIM) and the
//!   image transformations used as tracker countermeasures
//! - [`extractor`]: trainable convolutional feature extractors, including
//!   PGD adversarial training for robust variants
//! - [`targeting`]: decoy-class selection in feature space
//! - [`cloak`]: the budgeted perturbation optimizer (tanh-space penalty
//!   method)
//! - [`sybil`]: decoy-identity image generation
//! - [`tracker`]: tracker model training, protection scoring, and cloak
//!   detection
//! - [`harness`]: datasets, experiment orchestration, PCA projection

pub mod cloak;
pub mod error;
pub mod extractor;
pub mod harness;
pub mod imaging;
pub(crate) mod seed;
#[cfg(test)]
pub(crate) mod testutil;
pub mod sybil;
pub mod targeting;
pub mod tracker;

pub use error::{Error, Result};
