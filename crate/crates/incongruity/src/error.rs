use std::io;
use std::path::PathBuf;

use incongruity_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// Process exit status: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } | CliError::Checkpoint(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Core(e) => match e {
                CoreError::Config(_) => 2,
                CoreError::NonFinite(_) | CoreError::NonFiniteLoss { .. } | CoreError::State { .. } => 4,
                _ => 3,
            },
        }
    }
}
