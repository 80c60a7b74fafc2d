//! Restoration latent diffusion model: frozen autoencoder, conditional UNet
//! and the DDIM restoration loop.

pub mod autoencoder;
pub mod model;
pub mod unet;

pub use autoencoder::{train_autoencoder, Autoencoder, AutoencoderConfig, AutoencoderTraining};
pub use model::{noise_batch, train_rldm, NoisedBatch, Restoration, Rldm, RldmTraining, ScheduleConfig};
pub use unet::{ConditionalUnet, UnetConfig};
