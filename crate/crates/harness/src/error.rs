use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] echo_lora::Error),

    /// Config problem anchored to a line of the source file (1-based; 0 when unknown).
    #[error("{origin}:{line}: {message}")]
    Config { origin: String, line: usize, message: String },

    #[error("checkpoint checksum mismatch at offset {offset}")]
    Checksum { offset: u64 },

    #[error("checkpoint truncated at offset {offset}")]
    Truncated { offset: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("merge check failed: max deviation {max_deviation:e} on {module}")]
    MergeCheck { module: String, max_deviation: f64 },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
