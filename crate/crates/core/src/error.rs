use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or mask shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument is outside its documented range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data violates a contract (non-binary mask, unnormalized stack, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A target label is outside the class range.
    #[error("label error: {0}")]
    Label(String),

    /// An operation was called in a state where it is not allowed.
    #[error("state error: {0}")]
    State(String),

    /// Without-replacement sampling ran out of candidates.
    #[error("search space exhausted")]
    Exhausted,

    /// The operation is defined only for a narrower input family.
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
