use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] bline_core::Error),

    #[error("unknown architecture {name:?} for {level} level; available: {available}")]
    UnknownArch {
        name: String,
        level: String,
        available: String,
    },

    #[error("architecture {0:?} is reserved for an external plug-in and is not built in")]
    ReservedArch(String),

    #[error("contract mismatch: {0}")]
    LevelMismatch(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    /// Carries the history up to and including the failing epoch.
    #[error("training diverged at epoch {epoch}: non-finite {what} loss")]
    Diverged {
        epoch: usize,
        what: &'static str,
        history: Box<crate::trainer::History>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
