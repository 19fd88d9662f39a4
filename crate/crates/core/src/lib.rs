//! Forgery detection with separable CNNs, latent-feature segmentation and
//! hard voting over per-block classifiers.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`tape`] — dense N-d tensors and a reverse-mode autodiff tape
//! * [`layers`] — the layer vocabulary (conv, separable conv, batchnorm, ...)
//! * [`segmentation`] — block plans, feature splitting and hard voting
//! * [`model`] — network builders (feature extractor, SModel heads, Mesonet)
//! * [`train`] — Adam, cross-entropy training, checkpoints, evaluation
//! * [`metrics`] — confusion counts, ROC curves, AUC, optimal cutoff
//! * [`data`] — manifests, image decoding, the synthetic tamper generator

pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod segmentation;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use rng::Rng;
pub use tensor::Tensor;
