use thiserror::Error;

/// Failure modes shared by every module.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),
    /// Invalid environment, plan or command configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// A size cap was exceeded.
    #[error("resource error: {0}")]
    Resource(String),
    /// An iterative method failed to converge.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// The input makes the requested quantity undefined (e.g. ρ_m = 0).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Json(_) | Error::Io(_) => 2,
            Error::Resource(_) => 3,
            Error::Numerical(_) | Error::Degenerate(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
