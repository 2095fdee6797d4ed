use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing column '{0}' in csv header")]
    MissingColumn(String),

    #[error("unparsable cell at row {row}, column '{column}': {cell:?}")]
    BadCell {
        row: usize,
        column: String,
        cell: String,
    },

    #[error("data: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain: {0}")]
    Domain(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("bad file format: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable category name, used by the CLI to derive exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::MissingColumn(_) | Error::BadCell { .. } | Error::Data(_) => "data",
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Numeric(_) => "numeric",
            Error::Format(_) => "format",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
