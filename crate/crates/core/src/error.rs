use std::path::PathBuf;

/// Errors produced by every layer of the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    /// The full gradient vanished, so tr(Σ)/‖G‖² has no finite value.
    #[error("noise scale is infinite: full gradient is zero")]
    InfiniteNoiseScale,

    #[error("unsupported checkpoint format version {found} (this build reads {expected})")]
    UnsupportedFormat { found: u32, expected: u32 },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::NumericFault(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from bad inputs rather than the computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::OutOfRange(_) | Error::Config(_)
        )
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NumericFault(_))
    }
}
