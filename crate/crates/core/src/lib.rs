//! Unsupervised image clustering with a categorical/style latent space.
//!
//! An encoder maps each image to a softmax category code and a continuous
//! style code. Training combines an augmentation-consistency term, a
//! mutual-information term estimated with a discriminator, and an adversarial
//! critic pulling the code distribution toward a categorical × Gaussian prior.
//! The cluster of an image is the argmax of its category code.

pub mod api;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod prior;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
