use std::path::PathBuf;

/// Everything the runner can fail with.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cdgd_core::Error),
    #[error("{}: {location}: {message}", path.display())]
    Parse { path: PathBuf, location: String, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("usage: {0}")]
    Usage(String),
}

impl CliError {
    pub(crate) fn parse(path: impl Into<PathBuf>, location: impl Into<String>, message: impl ToString) -> Self {
        CliError::Parse { path: path.into(), location: location.into(), message: message.to_string() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub(crate) fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
