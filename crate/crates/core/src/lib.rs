//! Density estimation with masked autoregressive flows.
//!
//! The crate provides MADE conditioners (Gaussian and mixture heads), the
//! invertible layers they drive (affine autoregressive, coupling and
//! batch-normalisation layers), flow models built from them, maximum
//! likelihood training, preprocessing for tabular and image data, and
//! evaluation utilities.

pub mod checkpoint;
pub mod conditioner;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod layers;
pub mod masking;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{FlowError, Result};
pub use tensor::Tensor;
