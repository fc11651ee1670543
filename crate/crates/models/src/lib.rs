//! Predictors for clip-, frame- and pixel-level B-line detection, the
//! training loop that fits them and the inference paths that turn their
//! outputs into video-level predictions.
//!
//! The reference networks run on a small CPU engine ([`nn`]) with explicit
//! backward passes; results are deterministic for a fixed seed.

pub mod augment;
pub mod error;
pub mod inference;
pub mod nn;
pub mod optim;
pub mod trainer;
pub mod zoo;

pub use error::{Error, Result};
pub use zoo::{build_model, load_checkpoint, save_checkpoint, Predictor, Registry};
