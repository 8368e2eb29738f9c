//! Disentangled representation learning from diffusion time-steps.

pub mod checkpoint;
pub mod ddpm;
pub mod diti;
mod error;
pub mod eval;
pub mod generate;
pub mod pipeline;
pub mod schedule;
pub mod seed;
pub mod synth;
pub mod theory;

pub use error::{DitiError, Result};
