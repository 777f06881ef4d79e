//! A small CPU deep-learning framework and pipeline for binary chest X-ray
//! classification with a three-block convolutional network.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`conv`], [`pool`]: dense tensors and numeric kernels
//!   (im2col convolution, 2×2 max pooling, GEMM).
//! - [`layers`]: differentiable layers with hand-written backward passes.
//! - [`optim`]: Adam and SGD.
//! - [`model`], [`train`], [`checkpoint`]: the classifier, its training loop
//!   and binary persistence.
//! - [`data`]: image ingestion, stratified splitting and batching.
//! - [`metrics`]: confusion matrices and classification reports.
//! - [`gradcheck`]: finite-difference verification of every layer.
//! - [`cli`]: the `xrnet` command implementations.

pub mod checkpoint;
pub mod cli;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pool;
pub mod seeding;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use layers::Mode;
pub use model::{ConvBlock, Model, ModelConfig};
pub use tensor::Tensor;
