use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Invalid configuration; `path` locates the offending field.
    #[error("{path}: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Core(#[from] markpaint::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Csv { path: PathBuf, message: String },
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 for bad input, 3 for internal failures.
    pub fn exit_code(&self) -> i32 {
        use markpaint::Error as E;
        match self {
            HarnessError::Config { .. } | HarnessError::Csv { .. } => 1,
            HarnessError::Io { .. } => 3,
            HarnessError::Core(e) => match e {
                E::Numerical(_) => 3,
                _ => 1,
            },
        }
    }
}
