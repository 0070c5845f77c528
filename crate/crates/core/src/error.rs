use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{row}: {msg}")]
    Parse { path: PathBuf, row: usize, msg: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("class {class} has {available} training instances, {required} required")]
    InsufficientData {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("metadata error: {0}")]
    Metadata(String),

    #[error("empty age bin {bin} of {bins}")]
    EmptyBin { bin: usize, bins: usize },

    #[error("coverage error: subclass {0} has no instances")]
    Coverage(usize),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("input error: {0}")]
    Input(String),

    #[error("cannot draw a wrong class when k = {0}")]
    ImpossibleDraw(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("plot error: {0}")]
    Plot(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
