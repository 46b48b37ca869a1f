use std::path::{Path, PathBuf};

/// Failures of the command-line layer, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] erc_core::Error),
    #[error("gradient check failed for {0}")]
    GradCheck(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), detail: detail.into() }
    }

    /// 2 for configuration and input problems, 3 for numerical divergence,
    /// 4 for a failed gradient check.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(erc_core::Error::Divergence { .. } | erc_core::Error::NonFinite(_)) => 3,
            Error::GradCheck(_) => 4,
            _ => 2,
        }
    }
}
