use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("unregistered primitive `{0}`")]
    UnregisteredPrimitive(String),
    #[error("input too short: need at least {needed} frames, got {got}")]
    InputTooShort { needed: usize, got: usize },
    #[error("impossible CTC alignment: {frames} frames cannot emit {labels} labels ({required} frames required)")]
    ImpossibleAlignment {
        frames: usize,
        labels: usize,
        required: usize,
    },
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("vocabulary mismatch: {0}")]
    Vocab(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
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
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::UnknownLanguage(_)
                | Error::Vocab(_)
                | Error::Length(_)
                | Error::InputTooShort { .. }
                | Error::Shape { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
