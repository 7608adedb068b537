//! Reference solver: backward value recursion with affine terms.
//!
//! The cost-to-go from state h at step t is V_t(h) = 1/2 h'P_t h + p_t'h up
//! to a constant that no algorithm needs. The recursion runs backward from
//! P_T = Q_T, p_T = 0:
//!
//! ```text
//!   M_t = R_t + B_t' P_t B_t
//!   K_t = -M_t^-1 B_t' P_t A_t            u_t = K_t h_{t-1} + k_t
//!   k_t = -M_t^-1 (B_t' p_t + r_t)
//!   P_{t-1} = Q_{t-1} + A_t' P_t A_t + (B_t' P_t A_t)' K_t
//!   p_{t-1} = A_t' (p_t + P_t B_t k_t)
//! ```
//!
//! One dense factorization of M_t per step, T in total. Each P is explicitly
//! re-symmetrized after its update; floating-point drift otherwise compounds
//! into the downstream PSD reasoning.
//!
//! Co-states follow from the adjoint recursion lambda_T = Q_T h_T,
//! lambda_t = Q_t h_t + A_{t+1}' lambda_{t+1}, lambda_0 = A_1' lambda_1.
//!
//! This module is the clarity-first baseline the fast path is checked
//! against; it makes no attempt to exploit structured storage.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{mat_to, mat_to_f64, vec_to, vec_to_f64, Precision, PrecisionTag, SpdFactor};
use crate::problem::{evaluate_cost, LqrParams, LqrTrajectory, Validated};

/// Value matrices, value offsets, gains and gain offsets for t = 1..T.
#[derive(Debug, Clone)]
pub struct ValueBackup {
    /// P_t, symmetric, with P_T = Q_T exactly.
    pub value_mats: Vec<DMatrix<f64>>,
    /// p_t, with p_T = 0 exactly.
    pub value_vecs: Vec<DVector<f64>>,
    /// Feedback gains K_t (m x n).
    pub gains: Vec<DMatrix<f64>>,
    /// Feedforward offsets k_t (m-vectors).
    pub offsets: Vec<DVector<f64>>,
}

impl ValueBackup {
    pub fn horizon(&self) -> usize {
        self.value_mats.len()
    }
}

fn backup_in<T: Precision, P: LqrParams>(p: &Validated<P>) -> Result<ValueBackup> {
    let horizon = p.horizon();
    let mut value_mats = vec![DMatrix::zeros(0, 0); horizon];
    let mut value_vecs = vec![DVector::zeros(0); horizon];
    let mut gains = vec![DMatrix::zeros(0, 0); horizon];
    let mut offsets = vec![DVector::zeros(0); horizon];

    let mut step = p.step(horizon);
    let mut pmat: DMatrix<T> = mat_to(&step.q);
    let mut pvec: DVector<T> = DVector::zeros(p.state_dim());
    value_mats[horizon - 1] = mat_to_f64(&pmat);
    value_vecs[horizon - 1] = vec_to_f64(&pvec);

    for t in (1..=horizon).rev() {
        let a = step.a.to_dense().map(T::of);
        let b = mat_to::<T>(&step.b);
        let r = step.r.to_dense().map(T::of);
        let lin: DVector<T> = step
            .affine
            .as_ref()
            .map(vec_to)
            .unwrap_or_else(|| DVector::zeros(p.control_dim()));

        let pb = &pmat * &b; // P_t B_t
        let gram = &r + b.transpose() * &pb;
        let factor = SpdFactor::new(gram).ok_or(Error::FactorizationFailure { t })?;
        let bpa = pb.transpose() * &a; // B_t' P_t A_t
        let kt = -factor.solve_mat(&bpa).ok_or(Error::FactorizationFailure { t })?;
        let kvec =
            -factor.solve_vec(&(b.transpose() * &pvec + &lin)).ok_or(Error::FactorizationFailure { t })?;
        gains[t - 1] = mat_to_f64(&kt);
        offsets[t - 1] = vec_to_f64(&kvec);

        if t > 1 {
            let prev = p.step(t - 1);
            let mut pnew = mat_to::<T>(&prev.q) + a.transpose() * &pmat * &a + bpa.transpose() * &kt;
            pnew = (&pnew + pnew.transpose()) * T::of(0.5);
            let pvnew = a.transpose() * (&pvec + &pb * &kvec);
            pmat = pnew;
            pvec = pvnew;
            value_mats[t - 2] = mat_to_f64(&pmat);
            value_vecs[t - 2] = vec_to_f64(&pvec);
            step = prev;
        }
    }

    Ok(ValueBackup { value_mats, value_vecs, gains, offsets })
}

/// Backward value recursion. Exactly T dense factorizations.
pub fn backup<P: LqrParams>(p: &Validated<P>) -> Result<ValueBackup> {
    backup_in::<f64, P>(p)
}

/// Rolls the optimal policy forward and extracts co-states.
pub fn solve<P: LqrParams>(p: &Validated<P>) -> Result<LqrTrajectory> {
    solve_with(p, PrecisionTag::F64)
}

/// Like [`solve`] but selecting the working precision. The 32-bit mode
/// exists for benchmarking; results are returned widened to f64.
pub fn solve_with<P: LqrParams>(p: &Validated<P>, precision: PrecisionTag) -> Result<LqrTrajectory> {
    match precision {
        PrecisionTag::F64 => solve_in::<f64, P>(p),
        PrecisionTag::F32 => solve_in::<f32, P>(p),
    }
}

fn solve_in<T: Precision, P: LqrParams>(p: &Validated<P>) -> Result<LqrTrajectory> {
    let horizon = p.horizon();
    let backup = backup_in::<T, P>(p)?;

    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    states.push(p.initial_state());
    for t in 1..=horizon {
        let s = p.step(t);
        let u = &backup.gains[t - 1] * &states[t - 1] + &backup.offsets[t - 1];
        let h = s.a.mul_vec(&states[t - 1]) + &s.b * &u;
        actions.push(u);
        states.push(h);
    }

    // Adjoint sweep for co-states.
    let mut costates = vec![DVector::zeros(p.state_dim()); horizon + 1];
    let last = p.step(horizon);
    costates[horizon] = &last.q * &states[horizon];
    let mut a_next = last.a;
    for t in (1..horizon).rev() {
        let s = p.step(t);
        costates[t] = &s.q * &states[t] + a_next.tr_mul_vec(&costates[t + 1]);
        a_next = s.a;
    }
    costates[0] = a_next.tr_mul_vec(&costates[1]);

    let cost = evaluate_cost(p.params(), &states, &actions)?;
    Ok(LqrTrajectory { states, actions, costates, cost })
}

/// Value of the quadratic cost-to-go model at step t (1-based), omitting the
/// state-independent constant. The reward-convention value is the negation
/// when r_t = 0.
pub fn value_at(backup: &ValueBackup, t: usize, h: &DVector<f64>) -> Result<f64> {
    if t == 0 || t > backup.horizon() {
        return Err(Error::IndexOutOfRange { index: t, len: backup.horizon() });
    }
    let pmat = &backup.value_mats[t - 1];
    let pvec = &backup.value_vecs[t - 1];
    if h.len() != pmat.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "state has length {}, expected {}",
            h.len(),
            pmat.nrows()
        )));
    }
    Ok(0.5 * (h.transpose() * pmat * h)[(0, 0)] + pvec.dot(h))
}
