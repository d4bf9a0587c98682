//! Desk-scale selective state-space models with a full interpretability
//! toolkit: tape-based autodiff, implicit-attention extraction, subspace
//! analytics, delta-sensitivity analysis, activation steering, sparse
//! autoencoder probes, a multi-timescale stable variant, synthetic task
//! harness, and a reporting CLI.

pub mod analytics;
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod report;
pub mod sae;
pub mod sensitivity;
pub mod ssm;
pub mod stable;
pub mod steering;
pub mod tasks;
pub mod tensor;

pub use error::{Result, SsmError};
pub use tensor::Tensor;
