//! Generative modelling by matching a prior to a learned embedding distribution.
//!
//! An autoencoder whose latent codes are batch-normalized is trained with an
//! adversarial interpolation critic (stage A). A latent-space GAN then learns to
//! map Gaussian prior samples onto the frozen embedding distribution (stage B).
//! Samples are produced by decoding mapped prior draws.
//!
//! The crate also carries the VAE / plain-autoencoder baselines, the metrics
//! used to compare them and the checkpoint and config file formats.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
