pub mod autodiff;
pub mod captions;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod samplers;
pub mod selftest;
pub mod tensor;
pub mod vae_losses;

pub use error::{Error, Result};
