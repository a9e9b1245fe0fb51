//! Latent space imaging: learned binary masks, a measurement-to-latent
//! encoder and a frozen generative decoder, plus a Fourier single-pixel
//! baseline and sensor simulation.

pub mod acquisition;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod digital;
pub mod error;
pub mod fsi;
pub mod generative;
pub mod metrics;
pub mod nn;
pub mod optical;
pub mod output;
pub mod scalar;
pub mod train;

pub use error::{LsiError, Result};
pub use scalar::Scalar;

/// `f64` tensor used throughout the pipeline.
pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
