use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {axis} expected {expected}, got {actual}")]
    Shape { op: &'static str, axis: &'static str, expected: usize, actual: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid corpus: {0}")]
    Validation(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
}

impl Error {
    pub fn shape(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape { op, axis, expected, actual }
    }
}
