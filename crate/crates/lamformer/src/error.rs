use std::path::PathBuf;

/// Failures of the std layer. Exit code 1 for usage and configuration
/// problems, 2 for everything that fails at run time.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] lamformer_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use lamformer_core::Error as C;
        match self {
            Error::Config(_) | Error::Core(C::Config(_) | C::Usage(_)) => 1,
            _ => 2,
        }
    }
}
