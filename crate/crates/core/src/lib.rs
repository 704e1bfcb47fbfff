//! Toy text-conditioned pixel diffusion with personalized low-rank residuals
//! and localized attention-guided (LAG) sampling.

pub mod data;
pub mod error;
pub mod eval;
pub mod net;
pub mod residuals;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::Tensor;
