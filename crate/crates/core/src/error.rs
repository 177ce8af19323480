use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("step {step} out of range [{min}, {max}]")]
    StepOutOfRange { step: usize, min: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("invalid sampler plan: {0}")]
    Plan(String),

    #[error("zero-norm latent: {0}")]
    ZeroNorm(String),

    #[error("empty index")]
    EmptyIndex,

    #[error("K={k} exceeds usable index size {available}")]
    NeighborCount { k: usize, available: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("manifest {path}, line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("split leakage: {0}")]
    SplitLeakage(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Divergence {
        epoch: usize,
        step: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("prototype index file: {0}")]
    IndexFormat(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
