use std::path::Path;

use drt_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid config at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 0 success, 1 usage or config, 2 I/O, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                CoreError::Io(_)
                | CoreError::Csv(_)
                | CoreError::Format { .. }
                | CoreError::Version { .. }
                | CoreError::Integrity(_) => 2,
                CoreError::Numeric(_) | CoreError::Undefined(_) => 3,
                _ => 1,
            },
        }
    }
}
