//! Error type shared by every module in the crate.

use std::io;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes a caller can observe from this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A line in an interaction log did not match the declared format.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The interaction log produced no usable events.
    #[error("dataset is empty")]
    EmptyDataset,

    /// A caller-supplied parameter is outside its documented domain.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A user has no training positives, so no center can be formed.
    #[error("no training positives to form an interest center")]
    NoPositives,

    /// Fewer than two items remain outside the user's positive set.
    #[error("user has {available} non-positive items, need at least 2")]
    NotEnoughNegatives { available: usize },

    /// An embedding row has zero norm, so cosine similarity is undefined.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    /// An index referred to a user or item outside the table.
    #[error("{kind} index {index} out of range (size {size})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        size: usize,
    },

    /// A checkpoint file is malformed or belongs to a different layout.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Ranking metrics are undefined for a user with no test positives.
    #[error("empty test set: metrics are undefined")]
    EmptyTestSet,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
