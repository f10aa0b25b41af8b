use thiserror::Error;

/// Crate-wide error type. Validation problems (shapes, config, vocabulary)
/// and numerical problems (non-finite values) are kept distinct so the CLI
/// can map them to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("tensors belong to different tapes (op {0})")]
    TapeMismatch(&'static str),

    #[error("non-finite value detected in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error("gradient check failed: {item}: rel err {err:.3e} above tolerance {tol:.1e}")]
    Threshold { item: String, err: f64, tol: f64 },

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code class: 1 for validation errors, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Threshold { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
