//! Controllable video generation from box tracks: synthetic data, motion and
//! content autoencoders, a decoder with super-resolution, adversarial
//! fine-tuning, evaluation and an HTTP service.

pub mod adversarial;
pub mod checkpoint;
pub mod content_vae;
pub mod error;
pub mod eval;
pub mod generator;
pub mod latent;
pub mod layers;
pub mod motion_vae;
pub mod preprocess;
pub mod rng;
pub mod service;
pub mod synth;
pub mod tracks;
pub mod train;
pub mod video;

pub use error::{Error, Result};
