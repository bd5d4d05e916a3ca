use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty neighborhood for {count} target point(s), first indices {first:?}; enlarge the radius")]
    EmptyNeighborhood { count: usize, first: Vec<usize> },

    #[error("CFL condition violated (courant number {courant:.3} > 1); reduce dt or increase substeps")]
    Cfl { courant: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("digest mismatch: expected {expected}, found {found}")]
    Digest { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
