use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("split produced an empty {0} partition")]
    EmptySplit(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{kind} index {index} out of range (size {size})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        size: usize,
    },

    #[error("user {user} has interacted with every item; no negative can be sampled")]
    NoNegative { user: u32 },

    #[error("non-finite parameter detected at epoch {epoch}, batch {batch} ({detail})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("positive sample set is empty after leakage filtering")]
    EmptyPositiveSet,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
