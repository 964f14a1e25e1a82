use std::path::PathBuf;

use thiserror::Error;

/// Why a tensor file failed to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadMagic,
    BadVersion(u8),
    BadDtype(u8),
    /// Valid dtype, but not the one the caller asked for.
    DtypeMismatch { expected: u8, found: u8 },
    ZeroDim,
    Truncated,
    TrailingBytes,
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::BadMagic => write!(f, "bad magic"),
            ParseErrorKind::BadVersion(v) => write!(f, "unsupported version {v}"),
            ParseErrorKind::BadDtype(d) => write!(f, "unknown dtype code {d}"),
            ParseErrorKind::DtypeMismatch { expected, found } => {
                write!(f, "dtype code {found} where {expected} was expected")
            }
            ParseErrorKind::ZeroDim => write!(f, "zero-sized dimension"),
            ParseErrorKind::Truncated => write!(f, "truncated input"),
            ParseErrorKind::TrailingBytes => write!(f, "trailing bytes after payload"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("{op}: index {index} out of range for bound {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("class {class} has no pixels in the mask")]
    EmptyClass { class: usize },

    #[error("no superpixel segment with area >= {min_area}")]
    NoQualifyingSegment { min_area: usize },

    #[error("tensor file {kind} at byte offset {offset}")]
    Parse { kind: ParseErrorKind, offset: usize },

    #[error("config {path}:{line}: {msg}")]
    ConfigParse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unknown config keys: {0:?}")]
    UnknownKeys(Vec<String>),

    #[error("config key `{key}` expects {expected}, got `{value}`")]
    ConfigType {
        key: String,
        expected: &'static str,
        value: String,
    },

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("training diverged at iteration {iteration}: loss = {loss} (seg {seg}, reg {reg}, lr {lr})")]
    Divergence {
        iteration: usize,
        loss: f64,
        seg: f64,
        reg: f64,
        lr: f64,
    },

    #[error("report error: {0}")]
    Report(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            msg: msg.into(),
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
