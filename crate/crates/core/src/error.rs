use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed {format} payload: {reason}")]
    Decode { format: &'static str, reason: String },

    #[error("cannot encode: {0}")]
    Encode(String),

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("round {round}: {reported} of {required} required clients reported")]
    Quorum {
        round: u32,
        reported: usize,
        required: usize,
    },

    #[error("stale store entry: {0}")]
    StaleEntry(String),

    #[error("store corrupted: {0}")]
    Store(String),

    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("manifest: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn decode(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Decode {
            format,
            reason: reason.into(),
        }
    }

    /// Wrap with the name of the pipeline phase that failed.
    pub fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }
}
