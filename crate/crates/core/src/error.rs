use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CarlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CarlError {
    #[error("dimension mismatch: {op} got {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("record {index}: value {value} outside label range [{lo}, {hi}]")]
    Range {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: missing or mistyped key `{key}`")]
    Schema {
        path: PathBuf,
        line: usize,
        key: String,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in {what} at step {step}")]
    Numeric { what: String, step: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("incompatible inputs: {0}")]
    Compatibility(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CarlError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CarlError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(what: impl Into<String>, step: usize) -> Self {
        CarlError::Numeric {
            what: what.into(),
            step,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CarlError::Config(_) | CarlError::Parameter(_) => 2,
            CarlError::Range { .. }
            | CarlError::Parse { .. }
            | CarlError::Schema { .. }
            | CarlError::Data(_)
            | CarlError::Io { .. }
            | CarlError::Format(_)
            | CarlError::Compatibility(_) => 3,
            CarlError::Numeric { .. } => 4,
            CarlError::Dimension { .. } | CarlError::Contract(_) => 1,
        }
    }
}
