use thiserror::Error;

/// Crate-wide error type. Variants map onto the process exit codes used by
/// the CLI: validation problems exit 1, verification failures exit 2, and
/// file problems exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("malformed {format} data in {path}: {detail}")]
    DataFormat {
        format: &'static str,
        path: String,
        detail: String,
    },

    #[error("inconsistent data: {0}")]
    DataConsistency(String),

    #[error("verification failure: {0}")]
    Verification(String),

    #[error("pipeline schedule error: {0}")]
    Schedule(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. }
            | Error::Invalid { .. }
            | Error::DataConsistency(_)
            | Error::Schedule(_) => 1,
            Error::Verification(_) => 2,
            Error::DataFormat { .. } | Error::Io { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
