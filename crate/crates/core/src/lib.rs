//! Unsupervised video anomaly scoring by diffusion reconstruction.
//!
//! A preconditioned denoiser is trained with denoising score matching on
//! unlabeled segment features. At scoring time each batch is corrupted to a
//! chosen noise level, reconstructed with a linear multistep ODE solver, and
//! segments whose reconstruction error exceeds `mean + k·std` of their batch
//! are flagged.

mod binio;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod numeric;
pub mod sampler;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
