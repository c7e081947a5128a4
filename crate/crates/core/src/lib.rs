//! Differentiable Top-K patch selection.
//!
//! Scores one value per image patch, selects `K` patches through a
//! perturbed (noise-smoothed) Top-K operator whose output is index-sorted,
//! and trains the scorer end to end through a Monte-Carlo Jacobian
//! estimate.

pub mod autodiff;
pub mod bench;
pub mod checks;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod patches;
pub mod perturbed;
pub mod pipeline;
pub mod ptkt;
pub mod rng;
#[cfg(feature = "sinkhorn")]
pub mod sinkhorn;
pub mod tasks;
pub mod tensor;
pub mod topk;

pub use error::{Error, Result};
pub use tensor::Tensor;
