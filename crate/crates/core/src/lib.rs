//! Self-predictive dynamics for pixel-based continuous control: two-way
//! augmentation, an adversarial latent discriminator, inverse→forward
//! dynamics chaining, and the off-policy agents and evaluation protocols
//! built around them.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod imageops;
pub mod nets;
pub mod objectives;
pub mod pixelenv;
pub mod rng;
pub mod trainer;

pub use error::{Result, SpdError};
