use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {stage}")]
    NonFinite { stage: String },

    #[error("no valid positions")]
    NoValidPositions,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("query exceeds T_max ({t} > {t_max})")]
    QueryExceedsTmax { t: usize, t_max: usize },

    #[error("truncated header")]
    TruncatedHeader,

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("extent overflow: {0}")]
    ExtentOverflow(String),

    #[error("annotation error at {context}: {message}")]
    Annotation { context: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
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

    /// True for errors caused by malformed or missing input data, as opposed
    /// to numerical failures.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}
