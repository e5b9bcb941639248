use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(
        "gradient check failed for `{tensor}`[{index}]: analytic {analytic:e}, numeric {numeric:e}, relative error {rel_err:e}"
    )]
    Gradient {
        tensor: String,
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_err: f64,
    },

    #[error("non-finite loss at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status for the command-line tool: 3 for generation
    /// failures, 4 for training divergence, 1 for a failed gradient check and
    /// 2 for every input problem.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Generation(_) => 3,
            Error::Divergence { .. } => 4,
            Error::Gradient { .. } => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
