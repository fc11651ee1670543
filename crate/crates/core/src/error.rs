use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("crop {crop:?} does not fit inside a {rows}x{cols} image")]
    InvalidCrop {
        crop: (usize, usize, usize, usize),
        rows: usize,
        cols: usize,
    },

    #[error("video {video_id} has {frames} frames, fewer than the clip length {clip_len}")]
    VideoTooShort {
        video_id: String,
        frames: usize,
        clip_len: usize,
    },

    #[error("cannot split {patients} patients into a test set and 5 folds (need at least {required})")]
    SplitInfeasible { patients: usize, required: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pixel spacing must be positive, got {0}")]
    InvalidSpacing(f64),

    #[error("annotation point ({row}, {col}) lies outside a {rows}x{cols} frame")]
    InvalidAnnotation {
        row: f64,
        col: f64,
        rows: usize,
        cols: usize,
    },

    #[error("sample weight must be positive, got {0}")]
    InvalidWeight(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cannot aggregate an empty list of unit scores")]
    EmptyAggregation,

    #[error("ensemble members are misaligned: {0}")]
    Alignment(String),

    #[error("AUC is undefined unless both classes are present ({positives} positives, {negatives} negatives)")]
    UndefinedAuc { positives: usize, negatives: usize },

    #[error("nothing to evaluate: {0}")]
    EmptyEvaluation(String),

    #[error("unknown video id {0}")]
    UnknownVideo(String),

    #[error("output directory {0} exists and is not empty (pass overwrite to replace it)")]
    OutputExists(PathBuf),

    #[error("malformed {file}: {reason}")]
    Format { file: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("png: {0}")]
    Png(String),
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}
