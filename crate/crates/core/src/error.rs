use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },

    #[error("duplicate qid {0}")]
    DuplicateQid(String),

    #[error("unknown qid {qid} ({context})")]
    UnknownQid { qid: String, context: String },

    #[error("node {node} out of range for graph with {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },

    #[error("graph size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("empty vocabulary: no token survived frequency filtering")]
    EmptyVocabulary,

    #[error("embedding provider failed on {qid}: {msg}")]
    Provider { qid: String, msg: String },

    #[error("sequence overflow: {0}")]
    SequenceOverflow(String),

    #[error("degenerate objective: all loss weights are zero")]
    DegenerateObjective,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("NaN loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("{0}")]
    Data(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::Shape { op: op.to_string(), detail: detail.into() }
    }

    /// True for errors caused by numerics (NaN, failed gradient checks) rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NanLoss { .. })
    }
}
