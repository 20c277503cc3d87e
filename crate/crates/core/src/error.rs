use std::path::PathBuf;

/// Errors produced anywhere in the quantization toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid quantization parameters: {0}")]
    Param(String),
    #[error("input outside quantizer domain: {0}")]
    Domain(String),
    #[error("value outside fixed-point range: {0}")]
    Range(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint header error: {0}")]
    Header(String),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss at block {block}, stage {stage}, iteration {iteration}")]
    NonFinite {
        block: usize,
        stage: u8,
        iteration: usize,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
