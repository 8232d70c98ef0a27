use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The variants map onto the CLI exit codes: [`Error::Io`] is an I/O failure,
/// everything else is a validation or configuration problem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {primitive}")]
    NonFinite { primitive: &'static str },

    #[error("unknown {kind}: {name}")]
    Lookup { kind: &'static str, name: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at step {step} (class {class}): non-finite loss")]
    Diverged { step: usize, class: String },

    #[error("line {line}: {message}")]
    Line { line: usize, message: String },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
