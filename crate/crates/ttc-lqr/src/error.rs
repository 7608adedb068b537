//! Error and invariant-violation types shared across the crate.

use thiserror::Error;

/// Which cost matrix a validation finding refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    StateCost,
    ActionCost,
}

impl std::fmt::Display for CostKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CostKind::StateCost => write!(f, "Q"),
            CostKind::ActionCost => write!(f, "R"),
        }
    }
}

/// A single violated problem invariant. Validation reports every violation
/// it finds, not just the first.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
    #[error("NotSymmetric: step {t}, {which} has relative asymmetry {asym:.3e}")]
    NotSymmetric { t: usize, which: CostKind, asym: f64 },
    #[error("NotPsd: step {t}, Q has min eigenvalue {min_eig:.3e} below -{floor:.3e}")]
    NotPsd { t: usize, min_eig: f64, floor: f64 },
    #[error("NotPd: step {t}, R has min eigenvalue {min_eig:.3e} below {floor:.3e}")]
    NotPd { t: usize, min_eig: f64, floor: f64 },
    #[error("SingularA: step {t}, A has min singular value {sigma_min:.3e} below {floor:.3e}")]
    SingularA { t: usize, sigma_min: f64, floor: f64 },
    #[error("StructureMismatch: step {t}, {0} storage differs from step 1", .field)]
    StructureMismatch { t: usize, field: &'static str },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("InvalidProblem: {} invariant violation(s): {}", .0.len(), join_violations(.0))]
    InvalidProblem(Vec<Violation>),
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
    #[error("FactorizationFailure: step {t}, R + B'PB is numerically singular")]
    FactorizationFailure { t: usize },
    #[error("SingularA: step {t}, dynamics matrix is numerically singular")]
    SingularA { t: usize },
    #[error("NonFiniteAccumulator: reverse sweep overflowed at step {t} (normalization off)")]
    NonFiniteAccumulator { t: usize },
    #[error("SingularY1: boundary system is singular; the problem is degenerate")]
    SingularY1,
    #[error("TooLarge: dense KKT assembly needs {rows} primal rows, cap is {cap}")]
    TooLarge { rows: usize, cap: usize },
    #[error("SingularKkt: dense KKT saddle matrix is singular")]
    SingularKkt,
    #[error("StaleCache: problem content changed since the forward pass")]
    StaleCache,
    #[error("SamplerStuck: rejection sampling exceeded {0} iterations")]
    SamplerStuck(u64),
    #[error("SingularContextA: step {t}, diagonal entry {entry} of A is {value:.3e}")]
    SingularContextA { t: usize, entry: usize, value: f64 },
    #[error("IndexOutOfRange: index {index} not in 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("UnsupportedInput: {0}")]
    UnsupportedInput(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
