use thiserror::Error;

/// Errors produced anywhere in the routing stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("k = {k} exceeds the number of columns ({cols})")]
    TopKTooLarge { k: usize, cols: usize },

    #[error("capacity {k} exceeds batch size {n}")]
    CapacityExceedsBatch { k: usize, n: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible capped problem: e*k = {demand} > n*b = {supply}")]
    Infeasible { demand: usize, supply: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64, losses: Vec<f64> },

    #[error("batch format: {0}")]
    Format(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
