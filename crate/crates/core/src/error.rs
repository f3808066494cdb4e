use alloc::string::String;

/// Failures raised by the numerical kernels.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// `max |t * lambda_k|` exceeded the overflow cap in `apply_inverse_semigroup`.
    #[error("apply_inverse_semigroup: |t*lambda| = {exponent:.3} exceeds overflow cap {cap}; use the direct formulation")]
    OverflowCap { exponent: f64, cap: f64 },

    #[error("apply_inverse_semigroup: dense generators have no inverse semigroup")]
    DenseInverse,

    /// A state became non-finite; `node` is the first bad grid index.
    #[error("blow-up at grid node {node}")]
    BlowUp { node: usize },

    #[error("unknown model {0:?}")]
    UnknownModel(String),

    #[error("projection of shape {rows}x{cols} has rank {rank}, expected {rows}")]
    RankDeficient { rows: usize, cols: usize, rank: usize },

    #[error("derivative order exhausted: finite-difference nesting exceeds {0}")]
    DerivativeOrder(u32),

    #[error("bracket set has {count} expressions, above the cap {cap}; lower the depth")]
    BracketCap { count: usize, cap: usize },

    #[error("{failed} of {total} paths blew up (more than 1%)")]
    TooManyBlowUps { failed: usize, total: usize },

    #[error("kernel density gridding is limited to k <= 2 (got k = {0})")]
    KdeDimension(usize),

    #[error("{0}")]
    Precondition(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
