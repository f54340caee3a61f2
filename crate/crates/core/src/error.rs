use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (row-level problems, missing columns).
    #[error("data error: {0}")]
    Data(String),

    #[error("value {value} for {what} lies outside [0, 1]")]
    Domain { what: String, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("penalized system is singular: {0}")]
    Singular(String),

    #[error("rank-deficient unpenalized design: {0}")]
    RankDeficient(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },
}

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Io { .. } | Error::Csv(_) | Error::Data(_) | Error::Domain { .. } | Error::Unknown { .. } => {
                ErrorClass::Data
            }
            Error::InvalidArgument(_)
            | Error::DimensionMismatch(_)
            | Error::Singular(_)
            | Error::RankDeficient(_)
            | Error::Numeric(_) => ErrorClass::Numeric,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
