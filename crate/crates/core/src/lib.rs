//! Probabilistic spatiotemporal imputation with a diffusion model and
//! feedback-controlled, cluster-aware classifier-free guidance.

pub mod clustering;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod guidance;
pub mod masking;
pub mod metrics;
pub mod oracle_world;
pub mod sampler;

pub use error::{Error, Result};
pub use grid::{GraphSpec, MaskMatrix, TrafficGrid};
