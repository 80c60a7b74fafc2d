//! Adversarial restoration attacks on face-embedding models.
//!
//! A conditional latent diffusion model restores degraded face images; the
//! attack perturbs the UNet noise prediction at the final reverse step so the
//! restored image is pushed towards a target identity while staying close to
//! the restoration output.

pub mod attack;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod facerec;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod rldm;

pub use error::{Error, Result};
pub use restore_autodiff::Tensor;
