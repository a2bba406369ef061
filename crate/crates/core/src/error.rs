use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::metrics::MetricError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by the library.
///
/// Variants are grouped by how the CLI reports them: configuration problems,
/// data problems and IO failures map to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{}: not a segment store (bad magic)", .0.display())]
    BadMagic(PathBuf),

    #[error("segment store truncated inside segment {segment_index}")]
    Truncated { segment_index: u64 },

    #[error(
        "token {token} in segment {segment_index} at position {position} is outside the vocabulary (size {vocab_size})"
    )]
    TokenOutOfRange {
        segment_index: u64,
        position: usize,
        token: u32,
        vocab_size: u32,
    },

    #[error("segment {segment_id}: {reason}")]
    InvalidSegment { segment_id: u64, reason: String },

    #[error("unknown segment id {0}")]
    UnknownSegment(u64),

    #[error("insufficient pool: {0}")]
    InsufficientPool(String),

    #[error("duplicate segment {0} across buckets or pools")]
    DuplicateSegment(u64),

    #[error("duplicate generation for probe {probe_id} (model {model_tag})")]
    DuplicateProbe { probe_id: String, model_tag: String },

    #[error("generation references unknown probe {0}")]
    DanglingProbe(String),

    #[error(transparent)]
    Metric(#[from] MetricError),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for this error: 1 validation, 2 data, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io { .. } => 3,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
