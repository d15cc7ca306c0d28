//! Latent-diffusion text-to-music toolkit with dual text conditioning: a
//! global embedding enters the denoiser through FiLM, per-token local
//! embeddings through cross-attention. Global embeddings may come from a
//! separate provider or be pooled (mean or self-attention) from the local
//! ones.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases below
//! fix the common instantiations.

pub mod autograd;
pub mod conditioning;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod pipeline;
pub mod sampling;
pub mod scalar;
pub mod schedule;
pub mod synthdata;
pub mod tensor;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Latent, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Schedule32 = schedule::NoiseSchedule<f32>;
pub type Schedule64 = schedule::NoiseSchedule<f64>;
pub type UNet32 = unet::UNet<f32>;
pub type UNet64 = unet::UNet<f64>;
pub type Condition32 = conditioning::Condition<f32>;
pub type Condition64 = conditioning::Condition<f64>;
