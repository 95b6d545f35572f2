//! Multi-scale single-image GAN with self-attention, smoothed critic inputs
//! and critic feedback between scales.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod params;
pub mod pyramid;
pub mod sampler;
pub mod smoothing;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use sampler::Sampler;
pub use sigan_autodiff::{Tensor, Var};
pub use trainer::Trainer;
