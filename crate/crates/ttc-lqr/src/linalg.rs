//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, Dyn, RealField};

use crate::metrics;

/// Scalar types the solvers can run in. Problems are stored in f64; the
/// symplectic and Riccati paths can execute in f32 for benchmarking.
pub trait Precision: RealField + Copy {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Precision for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Precision for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Numeric precision selector for solver entry points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrecisionTag {
    F32,
    #[default]
    F64,
}

impl PrecisionTag {
    pub fn bits(self) -> u32 {
        match self {
            PrecisionTag::F32 => 32,
            PrecisionTag::F64 => 64,
        }
    }
}

pub fn mat_to<T: Precision>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(T::of)
}

pub fn vec_to<T: Precision>(v: &DVector<f64>) -> DVector<T> {
    v.map(T::of)
}

pub fn mat_to_f64<T: Precision>(m: &DMatrix<T>) -> DMatrix<f64> {
    m.map(Precision::as_f64)
}

pub fn vec_to_f64<T: Precision>(v: &DVector<T>) -> DVector<f64> {
    v.map(Precision::as_f64)
}

/// Pivoted LU factorization of a square matrix, with solves against both the
/// matrix and its transpose so one factorization serves A x = b and A' x = b.
///
/// With A = P^-1 L U, the transpose solve uses
/// A' x = U' L' P x = b, i.e. x = P^-1 L'^-1 U'^-1 b.
pub struct LuFactors<T: Precision> {
    lu: nalgebra::LU<T, Dyn, Dyn>,
    lower: DMatrix<T>,
    upper: DMatrix<T>,
    singular: bool,
}

impl<T: Precision> LuFactors<T> {
    /// Factorizes `a`. Records one dense factorization.
    pub fn new(a: DMatrix<T>) -> Self {
        metrics::record_factorization();
        let n = a.nrows();
        let lu = a.lu();
        let lower = lu.l();
        let upper = lu.u();
        let mut max_diag = T::zero();
        let mut min_diag = T::of(f64::INFINITY);
        for i in 0..n {
            let d = upper[(i, i)].abs();
            if d > max_diag {
                max_diag = d;
            }
            if d < min_diag {
                min_diag = d;
            }
        }
        let floor = T::of(f64::EPSILON) * T::of(n.max(1) as f64) * max_diag;
        let singular = n > 0 && (min_diag <= floor || !min_diag.is_finite());
        LuFactors { lu, lower, upper, singular }
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    /// Solves A x = b.
    pub fn solve_vec(&self, b: &DVector<T>) -> Option<DVector<T>> {
        if self.singular {
            return None;
        }
        self.lu.solve(b)
    }

    /// Solves A X = B column-wise.
    pub fn solve_mat(&self, b: &DMatrix<T>) -> Option<DMatrix<T>> {
        if self.singular {
            return None;
        }
        self.lu.solve(b)
    }

    /// Solves A' x = b using the factors of A.
    pub fn solve_transpose_vec(&self, b: &DVector<T>) -> Option<DVector<T>> {
        if self.singular {
            return None;
        }
        let w = self.upper.tr_solve_upper_triangular(b)?;
        let mut x = self.lower.tr_solve_lower_triangular(&w)?;
        self.lu.p().inv_permute_rows(&mut x);
        Some(x)
    }

    /// Computes X A^-1 as the transpose of a solve: X A^-1 = (A'^-1 X')'.
    pub fn right_solve(&self, x: &DMatrix<T>) -> Option<DMatrix<T>> {
        if self.singular {
            return None;
        }
        let mut cols = DMatrix::zeros(x.ncols(), x.nrows());
        for (j, row) in x.row_iter().enumerate() {
            let rhs = row.transpose();
            let sol = self.solve_transpose_vec(&rhs)?;
            cols.set_column(j, &sol);
        }
        Some(cols.transpose())
    }
}

/// Factorization of a symmetric positive-definite block. Cholesky first,
/// with a pivoted LU fallback (the matrix is SPD in exact arithmetic but
/// rounding can push a marginal one over the edge).
pub enum SpdFactor<T: Precision> {
    Cholesky(nalgebra::Cholesky<T, Dyn>),
    Lu(nalgebra::LU<T, Dyn, Dyn>),
}

impl<T: Precision> SpdFactor<T> {
    /// Records one dense factorization. Returns None when both routes fail.
    pub fn new(m: DMatrix<T>) -> Option<Self> {
        metrics::record_factorization();
        match m.clone().cholesky() {
            Some(c) => Some(SpdFactor::Cholesky(c)),
            None => {
                let lu = m.lu();
                let u = lu.u();
                let n = u.nrows();
                let mut max_d = T::zero();
                for i in 0..n {
                    max_d = max_d.max(u[(i, i)].abs());
                }
                for i in 0..n {
                    if u[(i, i)].abs() <= T::of(f64::EPSILON * n as f64) * max_d {
                        return None;
                    }
                }
                Some(SpdFactor::Lu(lu))
            }
        }
    }

    pub fn solve_vec(&self, b: &DVector<T>) -> Option<DVector<T>> {
        match self {
            SpdFactor::Cholesky(c) => Some(c.solve(b)),
            SpdFactor::Lu(lu) => lu.solve(b),
        }
    }

    pub fn solve_mat(&self, b: &DMatrix<T>) -> Option<DMatrix<T>> {
        match self {
            SpdFactor::Cholesky(c) => Some(c.solve(b)),
            SpdFactor::Lu(lu) => lu.solve(b),
        }
    }
}

/// Largest absolute entry, used for relative comparisons.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Relative deviation ||a - b||_max / max(||a||_max, ||b||_max, 1e-300).
pub fn rel_diff_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = max_abs(a).max(max_abs(b)).max(1e-300);
    (a - b).iter().fold(0.0, |acc, x: &f64| acc.max(x.abs())) / scale
}

pub fn rel_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = max_abs_vec(a).max(max_abs_vec(b)).max(1e-300);
    (a - b).iter().fold(0.0, |acc, x: &f64| acc.max(x.abs())) / scale
}

pub fn rel_diff_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn well_conditioned(n: usize, salt: u64) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            let k = (i * n + j) as u64 ^ salt;
            let x = ((k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407) >> 33)
                as f64)
                / (u32::MAX as f64);
            x - 0.5 + if i == j { 2.0 } else { 0.0 }
        })
    }

    #[test]
    fn transpose_solve_matches_explicit_inverse() {
        for n in [1usize, 2, 5, 9] {
            let a = well_conditioned(n, 7);
            let b = DVector::from_fn(n, |i, _| (i as f64 + 1.0) * 0.3);
            let lu = LuFactors::new(a.clone());
            let x = lu.solve_transpose_vec(&b).unwrap();
            let direct = a.transpose().lu().solve(&b).unwrap();
            assert!((x - direct).amax() < 1e-12);
        }
    }

    #[test]
    fn right_solve_matches_inverse_product() {
        let a = well_conditioned(4, 21);
        let x = well_conditioned(4, 5);
        let lu = LuFactors::new(a.clone());
        let got = lu.right_solve(&x).unwrap();
        let want = &x * a.try_inverse().unwrap();
        assert!((got - want).amax() < 1e-12);
    }

    #[test]
    fn singular_matrix_is_flagged() {
        let a = DMatrix::<f64>::zeros(3, 3);
        let lu = LuFactors::new(a);
        assert!(lu.is_singular());
        assert!(lu.solve_vec(&DVector::zeros(3)).is_none());
    }

    #[test]
    fn factorization_counter_increments() {
        let (_, d) = metrics::with_counts(|| {
            let _ = LuFactors::new(well_conditioned(3, 1));
            let _ = SpdFactor::new(DMatrix::<f64>::identity(3, 3));
        });
        assert_eq!(d.dense_factorizations, 2);
    }
}
