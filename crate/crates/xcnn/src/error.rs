use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] xcnn_core::Error),

    /// A dataset or checkpoint file whose bytes do not parse; `offset` is
    /// where reading went wrong.
    #[error("{}: {what} at byte {offset}", path.display())]
    Format { path: PathBuf, what: String, offset: u64 },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, what: impl Into<String>, offset: u64) -> Self {
        Error::Format { path: path.into(), what: what.into(), offset }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
