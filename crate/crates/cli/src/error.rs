use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] protoreg::Error),
    #[error("invalid manifest: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 configuration, 3 data, 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use protoreg::Error as E;
        match self {
            CliError::Config(_) | CliError::Parse { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Config(_) | E::InvalidSpec(_) => 2,
                E::Format { .. }
                | E::VersionMismatch { .. }
                | E::DimMismatch { .. }
                | E::Io { .. }
                | E::EmptyEvalSet
                | E::UnknownLabel(_)
                | E::NoPixels(_)
                | E::NoBackground
                | E::ShapeMismatch(..) => 3,
                E::NonFinite(_) | E::ZeroVector { .. } => 4,
                _ => 1,
            },
        }
    }
}
