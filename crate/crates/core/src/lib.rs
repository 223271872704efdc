//! Function autoencoding and latent rectified flow on irregular point clouds.
//!
//! The pipeline has two trained pieces. A geometric function autoencoder
//! maps a partially observed field on a point cloud to a fixed-size grid
//! of latent tokens (Fourier coordinate features, a cross-attention
//! bottleneck, and a transformer stack) and decodes the tokens back to
//! field values at arbitrary query coordinates. A conditional rectified
//! flow then models the posterior over those latent tokens given a sparse,
//! noisy observation, so reconstruction under missing data comes with
//! ensemble uncertainty instead of a single point estimate.
//!
//! Supporting modules provide the dense-tensor autodiff engine the models
//! train with, synthetic field generators, geometry utilities for sensor
//! placement, two-stage training with checkpointing, and the metric suite
//! (relative L2, empirical and Gaussian 2-Wasserstein distances, and a
//! harness for the posterior-approximation error bound).

pub mod data;
pub mod error;
pub mod flow;
pub mod geofae;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
