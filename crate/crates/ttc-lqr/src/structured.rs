//! Storage for structured per-step matrices and the operators the solvers
//! stream them through.
//!
//! Dynamics matrices A and action costs R may be dense or diagonal. Diagonal
//! storage turns every inverse into an element-wise reciprocal, which is what
//! drops the per-step dense factorizations out of the symplectic path. R may
//! additionally be stored directly as the diagonal of R^-1, so a layer that
//! produces reciprocal action costs never inverts anything.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{LuFactors, Precision, SpdFactor};

/// Dense or diagonal square matrix storage.
#[derive(Debug, Clone, PartialEq)]
pub enum Structured {
    Dense(DMatrix<f64>),
    Diag(DVector<f64>),
}

impl Structured {
    pub fn dim(&self) -> usize {
        match self {
            Structured::Dense(m) => m.nrows(),
            Structured::Diag(d) => d.len(),
        }
    }

    pub fn is_square(&self) -> bool {
        match self {
            Structured::Dense(m) => m.is_square(),
            Structured::Diag(_) => true,
        }
    }

    pub fn is_diag(&self) -> bool {
        matches!(self, Structured::Diag(_))
    }

    pub fn storage_name(&self) -> &'static str {
        match self {
            Structured::Dense(_) => "dense",
            Structured::Diag(_) => "diag",
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Structured::Dense(m) => m.clone(),
            Structured::Diag(d) => DMatrix::from_diagonal(d),
        }
    }

    /// A v.
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Structured::Dense(m) => m * v,
            Structured::Diag(d) => v.component_mul(d),
        }
    }

    /// A' v.
    pub fn tr_mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Structured::Dense(m) => m.transpose() * v,
            Structured::Diag(d) => v.component_mul(d),
        }
    }

    /// Singular values reduce to |a_ii| for diagonal storage.
    pub fn singular_value_range(&self) -> (f64, f64) {
        match self {
            Structured::Dense(m) => {
                let sv = m.singular_values();
                (sv.min(), sv.max())
            }
            Structured::Diag(d) => {
                let mut lo = f64::INFINITY;
                let mut hi = 0.0f64;
                for x in d.iter() {
                    lo = lo.min(x.abs());
                    hi = hi.max(x.abs());
                }
                if d.is_empty() {
                    (0.0, 0.0)
                } else {
                    (lo, hi)
                }
            }
        }
    }
}

/// Action-cost storage. `DiagInverse` holds the diagonal of R^-1.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionCost {
    Dense(DMatrix<f64>),
    Diag(DVector<f64>),
    DiagInverse(DVector<f64>),
}

impl ActionCost {
    pub fn dim(&self) -> usize {
        match self {
            ActionCost::Dense(m) => m.nrows(),
            ActionCost::Diag(d) | ActionCost::DiagInverse(d) => d.len(),
        }
    }

    pub fn storage_name(&self) -> &'static str {
        match self {
            ActionCost::Dense(_) => "dense",
            ActionCost::Diag(_) => "diag",
            ActionCost::DiagInverse(_) => "diag_inverse",
        }
    }

    pub fn is_square(&self) -> bool {
        match self {
            ActionCost::Dense(m) => m.is_square(),
            _ => true,
        }
    }

    /// Materializes R itself.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            ActionCost::Dense(m) => m.clone(),
            ActionCost::Diag(d) => DMatrix::from_diagonal(d),
            ActionCost::DiagInverse(d) => DMatrix::from_diagonal(&d.map(|x| 1.0 / x)),
        }
    }

    /// u' R u.
    pub fn quad_form(&self, u: &DVector<f64>) -> f64 {
        match self {
            ActionCost::Dense(m) => (u.transpose() * m * u)[(0, 0)],
            ActionCost::Diag(d) => u.iter().zip(d.iter()).map(|(u, r)| u * u * r).sum(),
            ActionCost::DiagInverse(d) => u.iter().zip(d.iter()).map(|(u, p)| u * u / p).sum(),
        }
    }

    /// Smallest eigenvalue of R; for diagonal storage this is exact.
    pub fn min_eigenvalue(&self) -> f64 {
        match self {
            ActionCost::Dense(m) => {
                let sym = (m + m.transpose()) * 0.5;
                sym.symmetric_eigenvalues().min()
            }
            ActionCost::Diag(d) => d.min(),
            ActionCost::DiagInverse(d) => {
                // eigenvalues of R are reciprocals of the stored values
                d.iter().fold(f64::INFINITY, |acc, p| acc.min(1.0 / p))
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            ActionCost::Dense(m) => m.amax(),
            ActionCost::Diag(d) => d.amax(),
            ActionCost::DiagInverse(d) => d.iter().fold(0.0f64, |acc, p| acc.max(1.0 / p.abs())),
        }
    }
}

/// Per-step operator over A_t. Built once per step, drives both the row-block
/// updates of the reverse sweep and the column updates of the forward sweep.
pub enum DynamicsOp<T: Precision> {
    Diag { a: DVector<T> },
    Dense { a: DMatrix<T>, lu: LuFactors<T> },
}

/// Relative floor for |a_ii| (diagonal) or the LU pivots (dense).
pub const SINGULARITY_GUARD: f64 = 1e-10;

impl<T: Precision> DynamicsOp<T> {
    /// Records a dense factorization for dense A; diagonal storage only runs
    /// the reciprocal guard |a_ii| >= eps * max|a|.
    pub fn new(a: &Structured, t: usize) -> Result<Self> {
        match a {
            Structured::Diag(d) => {
                let hi = d.amax();
                let floor = SINGULARITY_GUARD * hi;
                if d.iter().any(|x| x.abs() < floor) || hi == 0.0 {
                    return Err(Error::SingularA { t });
                }
                Ok(DynamicsOp::Diag { a: d.map(T::of) })
            }
            Structured::Dense(m) => {
                let at = m.map(T::of);
                let lu = LuFactors::new(at.clone());
                if lu.is_singular() {
                    return Err(Error::SingularA { t });
                }
                Ok(DynamicsOp::Dense { a: at, lu })
            }
        }
    }

    /// A h.
    pub fn apply(&self, h: &DVector<T>) -> DVector<T> {
        match self {
            DynamicsOp::Diag { a } => h.component_mul(a),
            DynamicsOp::Dense { a, .. } => a * h,
        }
    }

    /// (A')^-1 v, the co-state half-step.
    pub fn inv_transpose_apply(&self, v: &DVector<T>, t: usize) -> Result<DVector<T>> {
        match self {
            DynamicsOp::Diag { a } => Ok(v.component_div(a)),
            DynamicsOp::Dense { lu, .. } => {
                lu.solve_transpose_vec(v).ok_or(Error::SingularA { t })
            }
        }
    }

    /// X (A')^-1 applied to a row block, i.e. solve Z A' = X.
    pub fn right_inv_transpose(&self, x: &DMatrix<T>, t: usize) -> Result<DMatrix<T>> {
        match self {
            DynamicsOp::Diag { a } => {
                let mut out = x.clone();
                for (j, aj) in a.iter().enumerate() {
                    let inv = T::one() / *aj;
                    out.column_mut(j).scale_mut(inv);
                }
                Ok(out)
            }
            DynamicsOp::Dense { lu, .. } => {
                let sol = lu.solve_mat(&x.transpose()).ok_or(Error::SingularA { t })?;
                Ok(sol.transpose())
            }
        }
    }

    /// X A applied to a row block.
    pub fn right_mul(&self, x: &DMatrix<T>) -> DMatrix<T> {
        match self {
            DynamicsOp::Diag { a } => {
                let mut out = x.clone();
                for (j, aj) in a.iter().enumerate() {
                    out.column_mut(j).scale_mut(*aj);
                }
                out
            }
            DynamicsOp::Dense { a, .. } => x * a,
        }
    }
}

/// Per-step operator applying R^-1. Diagonal storage is an element-wise
/// product; dense storage costs one SPD factorization.
pub enum ActionInverseOp<T: Precision> {
    Diag { rho: DVector<T> },
    Dense { factor: SpdFactor<T> },
}

impl<T: Precision> ActionInverseOp<T> {
    pub fn new(r: &ActionCost, t: usize) -> Result<Self> {
        match r {
            ActionCost::Diag(d) => Ok(ActionInverseOp::Diag {
                rho: d.map(|x| T::of(1.0 / x)),
            }),
            ActionCost::DiagInverse(d) => Ok(ActionInverseOp::Diag { rho: d.map(T::of) }),
            ActionCost::Dense(m) => {
                let factor = SpdFactor::new(m.map(T::of))
                    .ok_or(Error::FactorizationFailure { t })?;
                Ok(ActionInverseOp::Dense { factor })
            }
        }
    }

    /// R^-1 v.
    pub fn apply_vec(&self, v: &DVector<T>, t: usize) -> Result<DVector<T>> {
        match self {
            ActionInverseOp::Diag { rho } => Ok(v.component_mul(rho)),
            ActionInverseOp::Dense { factor } => {
                factor.solve_vec(v).ok_or(Error::FactorizationFailure { t })
            }
        }
    }

    /// X R^-1 for a row block; uses symmetry of R.
    pub fn right_apply(&self, x: &DMatrix<T>, t: usize) -> Result<DMatrix<T>> {
        match self {
            ActionInverseOp::Diag { rho } => {
                let mut out = x.clone();
                for (j, pj) in rho.iter().enumerate() {
                    out.column_mut(j).scale_mut(*pj);
                }
                Ok(out)
            }
            ActionInverseOp::Dense { factor } => {
                let sol = factor
                    .solve_mat(&x.transpose())
                    .ok_or(Error::FactorizationFailure { t })?;
                Ok(sol.transpose())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diag_ops_match_dense_ops() {
        let d = DVector::from_vec(vec![2.0, -0.5, 1.25]);
        let a_diag = Structured::Diag(d.clone());
        let a_dense = Structured::Dense(DMatrix::from_diagonal(&d));
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let v = DVector::from_vec(vec![0.3, -0.7, 2.0]);

        let op_d: DynamicsOp<f64> = DynamicsOp::new(&a_diag, 1).unwrap();
        let op_m: DynamicsOp<f64> = DynamicsOp::new(&a_dense, 1).unwrap();
        assert!((op_d.apply(&v) - op_m.apply(&v)).amax() < 1e-14);
        assert!(
            (op_d.right_inv_transpose(&x, 1).unwrap() - op_m.right_inv_transpose(&x, 1).unwrap())
                .amax()
                < 1e-13
        );
        assert!((op_d.right_mul(&x) - op_m.right_mul(&x)).amax() < 1e-14);
        assert!(
            (op_d.inv_transpose_apply(&v, 1).unwrap() - op_m.inv_transpose_apply(&v, 1).unwrap())
                .amax()
                < 1e-13
        );
    }

    #[test]
    fn diag_inverse_storage_applies_without_inversion() {
        let rho = DVector::from_vec(vec![4.0, 0.25]);
        let r = ActionCost::DiagInverse(rho.clone());
        let op: ActionInverseOp<f64> = ActionInverseOp::new(&r, 1).unwrap();
        let v = DVector::from_vec(vec![1.0, 1.0]);
        let out = op.apply_vec(&v, 1).unwrap();
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 0.25);
        // R itself is the reciprocal diagonal
        assert_eq!(r.to_dense()[(0, 0)], 0.25);
        assert!((r.quad_form(&v) - (0.25 + 4.0)).abs() < 1e-14);
    }

    #[test]
    fn near_singular_diag_a_is_rejected() {
        let a = Structured::Diag(DVector::from_vec(vec![1.0, 1e-12]));
        let got = DynamicsOp::<f64>::new(&a, 3);
        assert_eq!(got.err(), Some(Error::SingularA { t: 3 }));
    }
}
