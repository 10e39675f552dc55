use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum AdtError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("duplicate observation for site `{site}` at month {t}")]
    DuplicateKey { site: String, t: u32 },

    #[error("duplicate site id `{0}`")]
    DuplicateSite(String),

    #[error("observation references unknown site `{0}`")]
    UnknownSite(String),

    #[error("non-finite value in column `{column}` (row {row})")]
    NonFinite { column: String, row: usize },

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("learner error: {0}")]
    Learner(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite pseudo-outcome at row {row} (site {site}, month {t}): {detail}")]
    NonFinitePseudoOutcome {
        row: usize,
        site: String,
        t: u32,
        detail: String,
    },

    #[error("bootstrap failed: {successes} of {requested} replicates succeeded (need at least 80%)")]
    BootstrapFailed { successes: usize, requested: usize },
}

impl AdtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AdtError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration or input schema
    /// rather than by the computation itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            AdtError::Config(_) | AdtError::MissingColumn(_) | AdtError::Csv { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, AdtError>;
