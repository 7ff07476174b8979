//! Error types shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GfemError {
    #[error("dimension {axis} = {size} is not divisible by {divisor}")]
    DimNotDivisible {
        axis: &'static str,
        size: usize,
        divisor: usize,
    },

    #[error("{context}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("non-finite value in {part}: {value}")]
    NonFinite { part: String, value: f64 },

    #[error("checkpoint version mismatch: file has v{found}, this build reads v{expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("training diverged during {stage} at epoch {epoch}: {part} is non-finite")]
    Divergence {
        stage: String,
        epoch: usize,
        part: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, GfemError>;

impl GfemError {
    /// Attach a path to a raw io error (the bare `From` impl loses it).
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        GfemError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        GfemError::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn csv(path: impl AsRef<std::path::Path>, source: csv::Error) -> Self {
        GfemError::Csv {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
