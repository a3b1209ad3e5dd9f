use thiserror::Error;

pub type Result<T> = std::result::Result<T, WsError>;

#[derive(Debug, Error)]
pub enum WsError {
    #[error("row {0} has (near) zero norm and cannot be normalized")]
    ZeroRow(usize),
    #[error("row index {index} out of range for context length {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("row index {0} appears more than once in the perturbation")]
    DuplicateIndex(usize),
    #[error("perturbation of row {index} has norm {norm} above budget {budget}")]
    BudgetExceeded { index: usize, norm: f64, budget: f64 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("truncation ({req_n}, {req_d}) exceeds stored shape ({n}, {d})")]
    TruncationTooLarge { req_n: usize, req_d: usize, n: usize, d: usize },
    #[error("unexpected end of input")]
    ShortRead,
    #[error("invalid label {0}, expected -1 or +1")]
    BadLabel(i64),
    #[error("no variance satisfies the He condition: {0}")]
    NoSolution(String),
    #[error("feature vector has zero norm")]
    ZeroFeatureNorm,
    #[error("input matrix has rank zero")]
    RankZero,
    #[error("rows of the context span the whole embedding space")]
    FullRowRank,
    #[error("lifted direction W^T delta vanishes")]
    ZeroLift,
    #[error("features lie in the span of the training features")]
    DegenerateProjection,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl WsError {
    /// True for errors caused by malformed input files.
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            WsError::BadMagic(_)
                | WsError::VersionUnsupported(_)
                | WsError::TruncationTooLarge { .. }
                | WsError::ShortRead
                | WsError::BadLabel(_)
        )
    }
}
