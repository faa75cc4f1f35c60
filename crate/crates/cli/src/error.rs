use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checkpoint/config mismatch: {0}")]
    Mismatch(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Core(flashar_core::Error),
}

impl CliError {
    pub fn from_io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    /// 2 invalid config, 3 missing file, 4 checkpoint/config mismatch,
    /// 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }
}

impl From<flashar_core::Error> for CliError {
    fn from(e: flashar_core::Error) -> Self {
        use flashar_core::Error as E;
        match e {
            E::InvalidConfig(m) => CliError::Config(m),
            E::InvalidBranchDepth { .. } | E::InvalidStage(_) => CliError::Config(e.to_string()),
            E::ConfigMismatch(m) => CliError::Mismatch(m),
            E::NameSetMismatch(_) => CliError::Mismatch(e.to_string()),
            other => CliError::Core(other),
        }
    }
}
