//! Error type shared by every module in the crate.

use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse category used by callers that map errors to process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Invalid configuration or schema violation.
    Config,
    /// Filesystem or file-format failure.
    Io,
    /// Numerical divergence during training.
    Numeric,
    /// Anything else (shape mismatches, invalid arguments, ...).
    Usage,
}

#[derive(Debug)]
pub enum Error {
    /// Tensor/layer dimension mismatch. `detail` names the offending axis or layer.
    Shape { op: &'static str, detail: String },
    /// An argument violated an operation's precondition.
    InvalidArgument { op: &'static str, detail: String },
    /// Configuration file or schema violation.
    Config(String),
    /// Underlying I/O failure, with the path that was being accessed.
    Io { path: PathBuf, source: io::Error },
    /// Malformed file contents: bad magic, truncation, checksum mismatch, ...
    Format { path: Option<PathBuf>, detail: String },
    /// Training loss became non-finite.
    Divergence { epoch: usize, batch: usize },
    /// An operation that needs examples was handed an empty dataset.
    EmptyDataset { op: &'static str },
    /// No layer with the given id exists in the network.
    LayerNotFound(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Prefix the detail with a context label, typically a layer id.
    pub fn in_context(self, ctx: &str) -> Self {
        match self {
            Error::Shape { op, detail } => {
                Error::Shape { op, detail: format!("{ctx}: {detail}") }
            }
            Error::InvalidArgument { op, detail } => {
                Error::InvalidArgument { op, detail: format!("{ctx}: {detail}") }
            }
            Error::Format { path, detail } => {
                Error::Format { path, detail: format!("{ctx}: {detail}") }
            }
            other => other,
        }
    }

    pub fn format(detail: impl Into<String>) -> Self {
        Error::Format { path: None, detail: detail.into() }
    }

    pub fn format_at(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: Some(path.into()), detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Io { .. } | Error::Format { .. } => ErrorCategory::Io,
            Error::Divergence { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::Usage,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: dimension mismatch: {detail}"),
            Error::InvalidArgument { op, detail } => write!(f, "{op}: {detail}"),
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Format { path: Some(p), detail } => {
                write!(f, "malformed file {}: {detail}", p.display())
            }
            Error::Format { path: None, detail } => write!(f, "malformed data: {detail}"),
            Error::Divergence { epoch, batch } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}, batch {batch}")
            }
            Error::EmptyDataset { op } => write!(f, "{op}: dataset is empty"),
            Error::LayerNotFound(id) => write!(f, "no layer named {id:?}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
