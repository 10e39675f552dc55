//! Library side of the `adt` command-line tool: run configuration, command
//! implementations and file outputs. The binary is a thin clap wrapper.

pub mod commands;
pub mod config;
pub mod output;
pub mod svg;

use adt_core::AdtError;

/// Command failure, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or arguments, detected before any computation.
    #[error("{0}")]
    Config(String),
    /// Input data that could not be loaded as a panel.
    #[error("input data: {0}")]
    Input(AdtError),
    #[error(transparent)]
    Core(#[from] AdtError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration and input problems, 1 for failures during the run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Core(e) if e.is_config_error() => 2,
            CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
