use thiserror::Error;

/// Error type shared by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up with what an operation requires.
    #[error("dimension error in {op}: {msg}")]
    Dim { op: &'static str, msg: String },

    /// A numeric contract was violated (non-finite value, non-scalar loss,
    /// non-binary mask, prediction outside [0,1], failed gradient check).
    #[error("numeric contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Bad configuration or CLI usage.
    #[error("config error: {0}")]
    Config(String),

    /// Bad or missing data on disk (datasets, images, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dim { op, msg: msg.into() }
    }

    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { op, msg: msg.into() }
    }

    /// Process exit code for the CLI: 0 ok, 1 usage, 2 data, 3 numeric contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Dim { .. } => 2,
            Error::Contract { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
