use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MarnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MarnError {
    #[error("{kernel}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        kernel: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("lookup: id {id} out of range for table of {size} rows")]
    Lookup { id: usize, size: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("empty sequence: every position is masked")]
    EmptySequence,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("conflicting mapping for ICD code {code}: {first} vs {second}")]
    MappingConflict {
        code: String,
        first: String,
        second: String,
    },

    #[error("mapping gap: ICD code {0} has no CCS mapping")]
    MappingGap(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("checkpoint error in {field}: {message}")]
    Checkpoint { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MarnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MarnError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, message: impl Into<String>) -> Self {
        MarnError::Checkpoint {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by non-finite values during training or evaluation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, MarnError::Numeric(_))
    }
}
