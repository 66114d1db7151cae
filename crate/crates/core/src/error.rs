//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("matrix is not symmetric within tolerance (max asymmetry {max_asym:e})")]
    NotSymmetric { max_asym: f64 },

    #[error("matrix is singular to working precision at pivot {pivot}")]
    Singular { pivot: usize },

    #[error("object id {id} is outside the codebook (size {codebook_size})")]
    UnknownObject { id: u64, codebook_size: usize },

    #[error("edit batch is empty")]
    EmptyBatch,

    #[error("conflict group is empty")]
    EmptyGroup,

    #[error("fact universe exhausted: needed {needed} distinct (subject, relation) pairs, capacity {capacity}")]
    UniverseExhausted { needed: usize, capacity: usize },

    #[error("request stamped for round {got} but the server is at round {expected}; clients must edit from the latest global snapshot")]
    StaleRound { expected: u32, got: u32 },

    #[error("inconsistent packets: {0}")]
    InconsistentPackets(String),

    #[error("key matrix has {cols} column(s); Gram ambiguity needs at least 2 (a single column only admits sign flips, which do not hide the key)")]
    InsufficientKeyColumns { cols: usize },

    #[error("simulated residual diverged from the closed recurrence at step {step}: simulated {simulated:e}, predicted {predicted:e}")]
    RecurrenceMismatch {
        step: usize,
        simulated: f64,
        predicted: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Wire(#[from] crate::wire::WireError),
}

impl Error {
    /// True for failures of the numerics themselves (as opposed to bad
    /// inputs or malformed files). The CLI maps these to exit code 3.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. } | Error::NotSymmetric { .. } | Error::RecurrenceMismatch { .. }
        )
    }
}
