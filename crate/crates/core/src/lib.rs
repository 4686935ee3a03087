//! Probing frozen speech-style encoders on wearable sensor windows.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the common choices.

pub mod baseline;
pub mod encoder;
pub mod evalkit;
pub mod extract;
pub mod filterscope;
pub mod ingest;
pub mod lora;
pub mod numkit;
pub mod probe;
pub mod scalar;
pub mod synth;
pub mod weight_io;

pub use scalar::{DType, Scalar};

pub type Tensor32 = numkit::Tensor<f32>;
pub type Tensor64 = numkit::Tensor<f64>;
pub type EncoderWeights32 = encoder::EncoderWeights<f32>;
pub type EncoderWeights64 = encoder::EncoderWeights<f64>;
pub type ProbeModel32 = probe::ProbeModel<f32>;
pub type ProbeModel64 = probe::ProbeModel<f64>;
pub type LoraSet32 = lora::LoraSet<f32>;
pub type LoraSet64 = lora::LoraSet<f64>;
