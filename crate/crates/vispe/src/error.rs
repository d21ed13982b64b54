use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, VispeError>;

#[derive(Debug, thiserror::Error)]
pub enum VispeError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
}

impl VispeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VispeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            VispeError::Usage(_) => 2,
            VispeError::Config(_) => 3,
            VispeError::Numeric(_) => 4,
            VispeError::Io { .. } | VispeError::Format(_) => 5,
        }
    }
}
