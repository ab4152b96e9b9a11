use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Variants fall into three families that the command-line tool maps onto
/// distinct exit codes: invalid data ([`Error::is_data`]), numerical
/// failure ([`Error::Numerical`]) and everything else.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u64, expected: u64 },

    #[error("missing payload for subject {subject}: {path}")]
    MissingPayload { subject: String, path: PathBuf },

    #[error("payload size mismatch for subject {subject}: expected {expected} bytes, found {found}")]
    PayloadSize {
        subject: String,
        expected: u64,
        found: u64,
    },

    /// A data-model invariant does not hold. `invariant` names it.
    #[error("invariant violated ({invariant}): {detail}")]
    Invariant {
        invariant: &'static str,
        detail: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("silent channel: {0}")]
    SilentChannel(&'static str),

    #[error("unknown subject {0}")]
    UnknownSubject(String),

    #[error("direction index {0} is not on the grid")]
    OffGrid(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invariant(invariant: &'static str, detail: impl Into<String>) -> Self {
        Error::Invariant {
            invariant,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad input data rather than by usage or
    /// numerical trouble.
    pub fn is_data(&self) -> bool {
        !matches!(self, Error::Numerical(_) | Error::InvalidArgument(_) | Error::Config(_))
    }
}
