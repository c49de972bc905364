use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value produced by {op}{context}")]
    NonFinite { op: &'static str, context: String },
    #[error("graph lifecycle error: {0}")]
    Lifecycle(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Attaches a location (e.g. `layer 3 ffn`) to a numeric error so NaNs can be traced
    /// back to the layer step that produced them. Other variants pass through.
    pub fn in_context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::NonFinite { op, context } => Error::NonFinite {
                op,
                context: format!("{context} at {ctx}"),
            },
            other => other,
        }
    }

    /// True for errors caused by the configuration rather than by running it.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
