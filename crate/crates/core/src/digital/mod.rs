//! Measurement-to-latent encoder.

mod encoder;
mod mix;

pub use encoder::{count_parameters, DigitalEncoder, EncoderConfig, EncoderStages, InputNorm};
pub use mix::Mix;
