use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("IDX magic invalid at byte offset {offset}: {detail}")]
    IdxMagic { offset: usize, detail: String },

    #[error("IDX rank {rank} unsupported (expected 1 or 3), read at byte offset 3")]
    IdxRank { rank: u8 },

    #[error("IDX payload truncated at byte offset {offset}: expected {expected} bytes, found {actual}")]
    IdxTruncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("checkpoint header corrupt at line {line}: {detail}")]
    CkptHeader { line: usize, detail: String },

    #[error("checkpoint version mismatch: file has {found}, this build reads {expected}")]
    CkptVersion { found: String, expected: String },

    #[error("checkpoint tensor {name} overruns payload: needs bytes {start}..{end}, payload has {size}")]
    CkptOverrun {
        name: String,
        start: usize,
        end: usize,
        size: usize,
    },

    #[error("checkpoint payload has {extra} trailing bytes (expected size {expected})")]
    CkptTrailing { expected: usize, extra: usize },

    #[error("checkpoint missing tensor {0}")]
    CkptMissing(String),

    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("training diverged: non-finite {key} at step {step}")]
    Diverged { key: String, step: u64 },

    #[error("batch-norm running statistics were never updated; train stage A before generating")]
    UntrainedBn,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
