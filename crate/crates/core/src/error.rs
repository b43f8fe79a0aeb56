use std::path::PathBuf;

/// Errors raised anywhere in the engine.
///
/// The variants line up with the CLI exit codes: configuration and usage
/// problems exit 1, data problems 2, numeric faults 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("IDX parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("missing data file {}: {hint}", path.display())]
    MissingData { path: PathBuf, hint: String },

    #[error("threshold fit failed: {0}")]
    Fit(String),

    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Fit(_) => 1,
            Error::Parse { .. }
            | Error::Data(_)
            | Error::MissingData { .. }
            | Error::Checkpoint(_)
            | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! usage_err {
    ($($arg:tt)*) => { $crate::error::Error::Usage(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use usage_err;
