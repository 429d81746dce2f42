use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("data format error: {0}")]
    Format(String),
    #[error("frozen state: {0}")]
    Frozen(String),
    #[error("missing artifact {path}: run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: String },
    #[error("autodiff: {0}")]
    Autodiff(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error class: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Range(_) | Error::Frozen(_) | Error::Json(_) => 2,
            Error::Numerical(_) => 4,
            Error::Shape(_)
            | Error::Degenerate(_)
            | Error::Format(_)
            | Error::MissingArtifact { .. }
            | Error::Autodiff(_)
            | Error::Io(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
