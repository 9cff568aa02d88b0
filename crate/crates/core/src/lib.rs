//! Factored score composition for conditional diffusion policies, with a
//! trajectory-tube certificate for a quadrotor racing benchmark.

pub mod bench;
pub mod certify;
pub mod denoiser;
pub mod error;
pub mod exec;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod sensitivity;
mod vecops;
pub mod vehicle;

pub use error::{Error, Result};
pub use exec::Exec;
