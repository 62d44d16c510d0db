//! Deep latent variable models on a small reverse-mode autodiff engine.
//!
//! [`nn`] provides the tape, dense networks and Adam. On top of it:
//!
//! - [`vae`]: Gaussian-encoder variational autoencoder trained on the ELBO
//! - [`flow`]: planar and affine-coupling normalizing flows with exact densities
//! - [`diffusion`]: noise-prediction diffusion with a fixed forward chain
//! - [`arm`]: masked autoregressive model over discrete sequences
//! - [`gan`]: adversarial generator/discriminator pair (sampler only)

pub mod arm;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod gan;
pub mod nn;
pub mod vae;

pub use error::{Error, Result};
pub use nn::{Activation, Adam, AdamConfig, Mlp, Parameters, Tape, Tensor, TrainConfig, Var};
