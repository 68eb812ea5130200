use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("partial labeling: {labeled} of {total} records carry a value")]
    PartialLabels { labeled: usize, total: usize },

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("embedding provider `{provider}` failed on `{instance}`: {msg}")]
    Provider {
        provider: String,
        instance: String,
        msg: String,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("backend `{backend}`: {msg}")]
    Backend { backend: String, msg: String },

    #[error("unknown {registry} `{name}`")]
    Unknown {
        registry: &'static str,
        name: String,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("config: {0}")]
    Config(String),

    #[error("run interrupted after {0} completed instances")]
    Interrupted(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
