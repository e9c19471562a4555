//! Amortized inpainting guidance on analytic diffusion backbones.
//!
//! A frozen Gaussian-mixture score drives a probability-flow ODE; a small
//! actor network adds a guidance control trained by continuous-time
//! actor-critic, and Riccati / grid HJB solvers provide ground truth.

pub mod actor_critic;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod neural;
pub mod oracles;
pub mod solver;
pub mod streams;
pub mod tasks;

pub use error::{Error, Result};
