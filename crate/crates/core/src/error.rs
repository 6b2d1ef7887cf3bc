use std::path::PathBuf;

/// Errors produced while loading, scoring, or exporting LoRA checkpoints.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The byte stream does not follow the expected container or manifest layout.
    #[error("format error: {0}")]
    Format(String),

    /// Decoded values are unusable (NaN/Inf, non-positive alpha, ...).
    #[error("data error in tensor `{tensor}`: {reason}")]
    Data { tensor: String, reason: String },

    #[error("shape error in `{layer}`: {left:?} vs {right:?} ({reason})")]
    Shape {
        layer: String,
        left: Vec<usize>,
        right: Vec<usize>,
        reason: String,
    },

    /// Tensors could not be grouped into down/up pairs.
    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A model whose total absolute mass is zero cannot be balanced against another.
    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("unsupported manifest format_version `{found}` (expected `{expected}`)")]
    UnsupportedVersion { found: String, expected: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Write {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        layer: impl Into<String>,
        left: &[usize],
        right: &[usize],
        reason: impl Into<String>,
    ) -> Self {
        Error::Shape {
            layer: layer.into(),
            left: left.to_vec(),
            right: right.to_vec(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input (files, flags), as opposed to internal failures.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Write { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
