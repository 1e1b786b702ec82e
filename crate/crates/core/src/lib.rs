//! Desk-scale patch-pool self-supervised pretraining for fine-grained insect
//! recognition.
//!
//! An image is split into patches; half are encoded by a vision transformer
//! and pooled into a context token, the rest join a cross-image pool. The
//! model learns to score which pool patches belong to the image, while a
//! text encoder and an autoregressive decoder align images with their
//! hierarchical taxonomy descriptions.

pub mod alignment;
pub mod autodiff;
pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod params;
pub mod patching;
pub mod pooling;
pub mod prs;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use params::{EncoderConfig, ModelParams, Similarity};
pub use tensor::Matrix;
