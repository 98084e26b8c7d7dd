//! Toy latent-diffusion laboratory for adversarial examples against
//! diffusion models.

pub mod attacks;
pub mod checkpoint;
pub mod classifier;
pub mod codec;
pub mod data;
pub mod defenses;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod inversion;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
