use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MuseError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MuseError {
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },

    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: String,
        line: u64,
        reason: String,
    },

    #[error("{path}:{line}: invalid value `{value}` for {field}")]
    InvalidEnum {
        path: String,
        line: u64,
        field: String,
        value: String,
    },

    #[error("unknown content id {0}")]
    UnknownContentId(u32),

    #[error("ordering violation: {0}")]
    Ordering(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("index {index} out of range for table with {size} rows")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("target is not a question (row index {0})")]
    TargetNotQuestion(usize),

    #[error("single-class labels: AUC is undefined")]
    SingleClass,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("provenance violation: {0}")]
    Provenance(String),

    #[error("config {}: {message}", location(.path, *.line))]
    Config {
        path: Option<PathBuf>,
        line: Option<usize>,
        message: String,
    },

    #[error("bad archive {path}: {reason}")]
    Archive { path: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn location(path: &Option<PathBuf>, line: Option<usize>) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!("{}:{}", p.display(), l),
        (Some(p), None) => p.display().to_string(),
        (None, Some(l)) => format!("line {l}"),
        (None, None) => "<flags>".to_string(),
    }
}

impl MuseError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MuseError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MuseError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
