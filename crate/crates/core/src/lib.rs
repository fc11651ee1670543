//! Core pipeline pieces for detecting and localizing B-line artifacts in
//! lung-ultrasound (LUS) videos.
//!
//! Everything in this crate is a pure function of its inputs and an explicit
//! seed. Neural predictors live in `bline-models`; this crate covers the data
//! model, synthetic phantoms, label-map rendering, training objectives,
//! prediction aggregation and evaluation.

pub mod aggregate;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod labelmap;
pub mod objectives;
pub mod phantom;

pub use error::{Error, Result};
pub use grid::Grid;

/// Frame height after preprocessing.
pub const FRAME_HEIGHT: usize = 256;
/// Frame width after preprocessing.
pub const FRAME_WIDTH: usize = 384;
/// Number of frames per clip for clip-level models.
pub const CLIP_LENGTH: usize = 16;
/// Annotation cadence: only every n-th frame of a positive video is annotated.
pub const ANNOTATION_STRIDE: usize = 4;
