use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TvoError>;

#[derive(Debug, Error)]
pub enum TvoError {
    /// A recorded node received inputs of incompatible shape.
    #[error("shape error at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate importance weights: {0}")]
    DegenerateWeights(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TvoError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        TvoError::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        TvoError::Config(msg.into())
    }

    /// An I/O error that names the file it concerns.
    pub fn io_at(path: &std::path::Path, e: io::Error) -> Self {
        TvoError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }
}
