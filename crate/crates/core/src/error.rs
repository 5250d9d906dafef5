use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TbsError>;

#[derive(Debug, Error)]
pub enum TbsError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },
    #[error("{op}: degenerate input ({detail})")]
    Degenerate { op: &'static str, detail: String },
    #[error("cross attention needs at least one context row")]
    EmptyContext,
    #[error("support mask has no foreground cell at feature resolution")]
    DegenerateSupport,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("value {0} is not on this tape")]
    NotOnTape(usize),
    #[error("fold id {0} out of range 0..4")]
    Fold(usize),
    #[error("episode generation failed: {0}")]
    Generation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("episode dump error: {0}")]
    Dump(String),
    #[error("non-finite loss or gradient at step {step} (loss {loss}, episode seed {seed:#018x})")]
    NonFinite { step: u64, seed: u64, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TbsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TbsError::Io {
            path: path.into(),
            source,
        }
    }
}
