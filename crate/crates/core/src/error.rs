use std::path::PathBuf;

use crate::inference::InferenceTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite {
        context: String,
        /// Trace recorded up to the point where the bad value appeared.
        partial_trace: Option<Box<InferenceTrace>>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of range (valid: {valid})")]
    OutOfRange { index: usize, valid: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f32 },

    #[error("bad magic in {what}: expected {expected}, found {found}")]
    BadMagic {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: u64,
        found: u64,
    },

    #[error("dimension mismatch in {what}: {detail}")]
    DimensionMismatch { what: &'static str, detail: String },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint inconsistent with its metadata: {0}")]
    Inconsistent(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            partial_trace: None,
        }
    }
}
