use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid configuration or mismatched shapes. `layer` names the
    /// offending layer when the mismatch is local to one.
    #[error("configuration error{}: {msg}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Config { layer: Option<usize>, msg: String },

    #[error("numerical failure at step {step}: {detail}")]
    Numerical { step: usize, detail: String },

    #[error("labeling budget exhausted: requested {requested}, remaining {remaining} of {total}")]
    Budget {
        requested: usize,
        remaining: usize,
        total: usize,
    },

    #[error("logic error: {0}")]
    Logic(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("cosine undefined: {0}")]
    UndefinedCosine(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config {
            layer: None,
            msg: msg.into(),
        }
    }

    pub(crate) fn layer(layer: usize, msg: impl Into<String>) -> Self {
        Error::Config {
            layer: Some(layer),
            msg: msg.into(),
        }
    }

    /// Re-tags a numerical failure with the iteration it happened in.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Numerical { detail, .. } => Error::Numerical { step, detail },
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
