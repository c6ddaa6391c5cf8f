use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is singular or ill-conditioned (pivot {pivot:e}, condition estimate {cond_estimate:e})")]
    SingularMatrix { pivot: f64, cond_estimate: f64 },

    #[error("matrix is not positive definite (pivot {value:e} at index {index})")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("dimension {dim} is too small (need at least {min})")]
    DimensionTooSmall { dim: usize, min: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid architecture: {0}")]
    InvalidConfig(String),

    #[error("configuration does not match the transform's hypotheses: {0}")]
    ConfigMismatch(String),

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("no query matrix with condition <= {max_cond} after {attempts} draws")]
    ConditioningFailure { attempts: usize, max_cond: f64 },

    #[error("vector is not zero-mean (mean {mean:e})")]
    NotZeroMean { mean: f64 },

    #[error("vector outside the LayerNorm image ball (|z|^2 = {norm_sq}, limit {limit})")]
    OutsideImageBall { norm_sq: f64, limit: f64 },

    #[error("(A^T)^-1 1 has a zero entry at index {index}; D' would be singular")]
    ZeroEntryInV { index: usize },

    #[error("W2[:,J] W1[J,:] + I has max residual {residual:e} > tolerance {tol:e}")]
    ConditionNotSatisfied { residual: f64, tol: f64 },

    #[error("index set of size {size} is smaller than h = {min}")]
    SubsetTooSmall { size: usize, min: usize },

    #[error("width m = {m} exceeds the exhaustive search cap of {max}")]
    WidthTooLargeForExhaustiveSearch { m: usize, max: usize },

    #[error("every target column in the batch has (near) zero norm")]
    AllTargetsDegenerate,
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
