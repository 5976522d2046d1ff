use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index out of range in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("alignment mismatch: {0}")]
    Alignment(String),

    #[error("degenerate attention: row {row} has no allowed entries")]
    DegenerateAttention { row: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),

    #[error("unsupported checkpoint version {found}; this reader supports version {supported}")]
    Version { found: u16, supported: u16 },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("gradient check harness: {0}")]
    Harness(String),

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("scale {scale}: {source}")]
    AtScale {
        scale: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_scale(self, scale: usize) -> Self {
        match self {
            e @ Error::AtScale { .. } => e,
            e => Error::AtScale {
                scale,
                source: Box::new(e),
            },
        }
    }
}
