use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] videoar_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("parse error at byte {offset} of {input:?}: {msg}")]
    Parse { input: String, offset: usize, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("invariant failed: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// 1 for problems with the invocation or its inputs, 2 for internal
    /// failures.
    pub fn exit_code(&self) -> i32 {
        use videoar_core::Error as E;
        match self {
            Error::Invariant(_) => 2,
            Error::Core(E::Numeric { .. } | E::Training { .. } | E::Protocol(_)) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
