//! Problem and trajectory data model.
//!
//! A finite-horizon problem is
//!
//! ```text
//!   minimize   sum_{t=1..T}  1/2 (h_t' Q_t h_t + u_t' R_t u_t) + r_t' u_t
//!   subject to h_t = A_t h_{t-1} + B_t u_t,   h_0 given,
//! ```
//!
//! with Q_t symmetric PSD, R_t symmetric PD, and every A_t invertible. The
//! state cost at t = 0 is identically zero and never stored; solvers treat
//! the index t-1 = 0 specially. Q_T doubles as the terminal cost.
//!
//! Validation symmetrizes Q and R, checks every invariant, and reports all
//! violations at once. Downstream solvers only accept [`Validated`] problems.

use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, Violation};
use crate::structured::{ActionCost, Structured};

/// Parameters of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParams {
    /// Dynamics matrix A_t (n x n), dense or diagonal.
    pub a: Structured,
    /// Control matrix B_t (n x m).
    pub b: DMatrix<f64>,
    /// State cost Q_t (n x n), symmetric PSD.
    pub q: DMatrix<f64>,
    /// Action cost R_t (m x m), symmetric PD; possibly stored as diag(R^-1).
    pub r: ActionCost,
    /// Optional affine action cost r_t (length m).
    pub affine: Option<DVector<f64>>,
}

/// A complete problem instance with materialized steps, 1-indexed in time.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrProblem {
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: usize,
    pub h0: DVector<f64>,
    pub steps: Vec<StepParams>,
}

/// Access to problem data the solvers stream step by step. Implementations
/// may materialize steps (storage-backed problems) or synthesize them on
/// demand (context-conditioned problems); solvers never require the whole
/// horizon in memory at once.
pub trait LqrParams: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn initial_state(&self) -> DVector<f64>;

    /// Parameters at step t, 1 <= t <= T.
    fn step(&self, t: usize) -> StepParams;

    /// True when some step carries a nonzero affine action cost.
    fn has_affine(&self) -> bool {
        (1..=self.horizon()).any(|t| {
            self.step(t)
                .affine
                .map(|r| r.iter().any(|x| *x != 0.0))
                .unwrap_or(false)
        })
    }

    /// Content hash over dimensions and every parameter entry, used to
    /// detect stale backward caches.
    fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.state_dim().hash(&mut h);
        self.control_dim().hash(&mut h);
        self.horizon().hash(&mut h);
        for x in self.initial_state().iter() {
            x.to_bits().hash(&mut h);
        }
        for t in 1..=self.horizon() {
            let s = self.step(t);
            match &s.a {
                Structured::Dense(m) => {
                    0u8.hash(&mut h);
                    for x in m.iter() {
                        x.to_bits().hash(&mut h);
                    }
                }
                Structured::Diag(d) => {
                    1u8.hash(&mut h);
                    for x in d.iter() {
                        x.to_bits().hash(&mut h);
                    }
                }
            }
            for x in s.b.iter() {
                x.to_bits().hash(&mut h);
            }
            for x in s.q.iter() {
                x.to_bits().hash(&mut h);
            }
            match &s.r {
                ActionCost::Dense(m) => {
                    2u8.hash(&mut h);
                    for x in m.iter() {
                        x.to_bits().hash(&mut h);
                    }
                }
                ActionCost::Diag(d) => {
                    3u8.hash(&mut h);
                    for x in d.iter() {
                        x.to_bits().hash(&mut h);
                    }
                }
                ActionCost::DiagInverse(d) => {
                    4u8.hash(&mut h);
                    for x in d.iter() {
                        x.to_bits().hash(&mut h);
                    }
                }
            }
            match &s.affine {
                Some(r) => {
                    5u8.hash(&mut h);
                    for x in r.iter() {
                        x.to_bits().hash(&mut h);
                    }
                }
                None => 6u8.hash(&mut h),
            }
        }
        h.finish()
    }
}

impl LqrParams for LqrProblem {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn initial_state(&self) -> DVector<f64> {
        self.h0.clone()
    }
    fn step(&self, t: usize) -> StepParams {
        self.steps[t - 1].clone()
    }
    fn has_affine(&self) -> bool {
        self.steps.iter().any(|s| {
            s.affine
                .as_ref()
                .map(|r| r.iter().any(|x| *x != 0.0))
                .unwrap_or(false)
        })
    }
}

/// Full solution of a problem: states h_0..h_T, actions u_1..u_T, co-states
/// lambda_0..lambda_T, and the objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrTrajectory {
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub costates: Vec<DVector<f64>>,
    pub cost: f64,
}

impl LqrTrajectory {
    /// max_t || h_t - A_t h_{t-1} - B_t u_t ||_inf.
    pub fn dynamics_residual<P: LqrParams>(&self, p: &P) -> f64 {
        let mut worst = 0.0f64;
        for t in 1..=p.horizon() {
            let s = p.step(t);
            let pred = s.a.mul_vec(&self.states[t - 1]) + &s.b * &self.actions[t - 1];
            worst = worst.max((&self.states[t] - pred).amax());
        }
        worst
    }

    pub fn first_action(&self) -> &DVector<f64> {
        &self.actions[0]
    }
}

/// Validation tolerances. All but `dynamics` scale with the data they check.
#[derive(Debug, Clone, Copy)]
pub struct ToleranceSet {
    /// PSD slack for Q: eigenvalues may dip to -psd_rel * ||Q||_inf.
    pub psd_rel: f64,
    /// PD floor for R: min eigenvalue must exceed pd_rel * ||R||_inf.
    pub pd_rel: f64,
    /// Absolute floor under the relative PD threshold.
    pub pd_abs_floor: f64,
    /// Invertibility floor for A: sigma_min >= inv_rel * sigma_max.
    pub inv_rel: f64,
    /// Dynamics feasibility tolerance for solver outputs.
    pub dynamics: f64,
    /// Relative asymmetry above which symmetrization warns.
    pub sym_warn_rel: f64,
}

impl Default for ToleranceSet {
    fn default() -> Self {
        ToleranceSet {
            psd_rel: 1e-10,
            pd_rel: 1e-12,
            pd_abs_floor: 1e-30,
            inv_rel: 1e-10,
            dynamics: 1e-8,
            sym_warn_rel: 1e-8,
        }
    }
}

/// A problem that passed validation. All solver entry points take this
/// wrapper; it derefs to the underlying parameters.
#[derive(Debug, Clone)]
pub struct Validated<P: LqrParams> {
    inner: P,
    warnings: Vec<String>,
}

impl<P: LqrParams> Validated<P> {
    /// Wraps parameters whose validity is guaranteed by construction
    /// (generated problems, context-conditioned problems). No checks run.
    pub fn new_unchecked(inner: P) -> Self {
        Validated { inner, warnings: Vec::new() }
    }

    pub fn params(&self) -> &P {
        &self.inner
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: LqrParams> std::ops::Deref for Validated<P> {
    type Target = P;
    fn deref(&self) -> &P {
        &self.inner
    }
}

fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(1e-300);
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Checks every invariant, symmetrizing Q and R in place. Returns the
/// annotated problem or the full list of violations.
pub fn validate_problem(mut p: LqrProblem, tol: &ToleranceSet) -> Result<Validated<LqrProblem>> {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    let (n, m) = (p.state_dim, p.control_dim);

    if n == 0 || m == 0 || p.horizon == 0 {
        violations.push(Violation::DimensionMismatch(
            "state_dim, control_dim and horizon must be positive".into(),
        ));
    }
    if p.h0.len() != n {
        violations.push(Violation::DimensionMismatch(format!(
            "h0 has length {}, expected {}",
            p.h0.len(),
            n
        )));
    }
    if p.steps.len() != p.horizon {
        violations.push(Violation::DimensionMismatch(format!(
            "{} steps provided for horizon {}",
            p.steps.len(),
            p.horizon
        )));
        return Err(Error::InvalidProblem(violations));
    }

    let a_name = p.steps.first().map(|s| s.a.storage_name());
    let r_name = p.steps.first().map(|s| s.r.storage_name());

    for (idx, step) in p.steps.iter_mut().enumerate() {
        let t = idx + 1;
        let dims_ok = step.a.dim() == n
            && step.a.is_square()
            && step.b.nrows() == n
            && step.b.ncols() == m
            && step.q.nrows() == n
            && step.q.ncols() == n
            && step.r.dim() == m
            && step.r.is_square()
            && step.affine.as_ref().map(|r| r.len() == m).unwrap_or(true);
        if !dims_ok {
            violations.push(Violation::DimensionMismatch(format!(
                "step {t} has inconsistent matrix dimensions"
            )));
            continue;
        }

        if Some(step.a.storage_name()) != a_name {
            violations.push(Violation::StructureMismatch { t, field: "A" });
        }
        if Some(step.r.storage_name()) != r_name {
            violations.push(Violation::StructureMismatch { t, field: "R" });
        }

        // Symmetrize Q; warn when the asymmetry is more than rounding noise.
        let asym = relative_asymmetry(&step.q);
        if asym > 0.0 {
            if asym > tol.sym_warn_rel {
                warnings.push(format!(
                    "step {t}: Q symmetrized, relative asymmetry {asym:.3e}"
                ));
            }
            step.q = (&step.q + step.q.transpose()) * 0.5;
        }
        if let ActionCost::Dense(rm) = &mut step.r {
            let asym = relative_asymmetry(rm);
            if asym > 0.0 {
                if asym > tol.sym_warn_rel {
                    warnings.push(format!(
                        "step {t}: R symmetrized, relative asymmetry {asym:.3e}"
                    ));
                }
                *rm = (&*rm + rm.transpose()) * 0.5;
            }
        }

        let q_floor = tol.psd_rel * step.q.amax();
        let q_min = if n > 0 {
            step.q.symmetric_eigenvalues().min()
        } else {
            0.0
        };
        if q_min < -q_floor {
            violations.push(Violation::NotPsd { t, min_eig: q_min, floor: q_floor });
        }

        let r_floor = (tol.pd_rel * step.r.max_abs()).max(tol.pd_abs_floor);
        let r_min = step.r.min_eigenvalue();
        if !(r_min >= r_floor) {
            violations.push(Violation::NotPd { t, min_eig: r_min, floor: r_floor });
        }

        let (sv_min, sv_max) = step.a.singular_value_range();
        let a_floor = tol.inv_rel * sv_max;
        if !(sv_min >= a_floor) || sv_max == 0.0 {
            violations.push(Violation::SingularA { t, sigma_min: sv_min, floor: a_floor });
        }
    }

    if violations.is_empty() {
        Ok(Validated { inner: p, warnings })
    } else {
        Err(Error::InvalidProblem(violations))
    }
}

/// Objective value of a (not necessarily feasible) state/action sequence.
/// Dynamics feasibility is a separate check.
pub fn evaluate_cost<P: LqrParams>(
    p: &P,
    states: &[DVector<f64>],
    actions: &[DVector<f64>],
) -> Result<f64> {
    let horizon = p.horizon();
    if states.len() != horizon + 1 || actions.len() != horizon {
        return Err(Error::DimensionMismatch(format!(
            "expected {} states and {} actions, got {} and {}",
            horizon + 1,
            horizon,
            states.len(),
            actions.len()
        )));
    }
    let mut total = 0.0;
    for t in 1..=horizon {
        let s = p.step(t);
        let h = &states[t];
        let u = &actions[t - 1];
        if h.len() != p.state_dim() || u.len() != p.control_dim() {
            return Err(Error::DimensionMismatch(format!(
                "trajectory dimensions do not match problem at step {t}"
            )));
        }
        total += 0.5 * ((h.transpose() * &s.q * h)[(0, 0)] + s.r.quad_form(u));
        if let Some(r) = &s.affine {
            total += r.dot(u);
        }
    }
    Ok(total)
}

/// Rolls the dynamics forward from h_0 under the given actions.
pub fn rollout<P: LqrParams>(p: &P, actions: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    if actions.len() != p.horizon() {
        return Err(Error::DimensionMismatch(format!(
            "expected {} actions, got {}",
            p.horizon(),
            actions.len()
        )));
    }
    let mut states = Vec::with_capacity(p.horizon() + 1);
    states.push(p.initial_state());
    for t in 1..=p.horizon() {
        let s = p.step(t);
        let u = &actions[t - 1];
        if u.len() != p.control_dim() {
            return Err(Error::DimensionMismatch(format!(
                "action {t} has length {}, expected {}",
                u.len(),
                p.control_dim()
            )));
        }
        let h = s.a.mul_vec(&states[t - 1]) + &s.b * u;
        states.push(h);
    }
    Ok(states)
}

/// Convenience constructor for small literal problems (tests, docs).
pub fn problem_from_dense(
    h0: Vec<f64>,
    steps: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Option<Vec<f64>>)>,
) -> LqrProblem {
    let n = h0.len();
    let m = steps[0].1[0].len();
    let horizon = steps.len();
    let dense = |rows: &Vec<Vec<f64>>| {
        let r = rows.len();
        let c = rows[0].len();
        DMatrix::from_fn(r, c, |i, j| rows[i][j])
    };
    LqrProblem {
        state_dim: n,
        control_dim: m,
        horizon,
        h0: DVector::from_vec(h0),
        steps: steps
            .into_iter()
            .map(|(a, b, q, r, lin)| StepParams {
                a: Structured::Dense(dense(&a)),
                b: dense(&b),
                q: dense(&q),
                r: ActionCost::Dense(dense(&r)),
                affine: lin.map(DVector::from_vec),
            })
            .collect(),
    }
}

/// The worked scalar instance used across the documentation and tests:
/// n = m = 1, T = 2, A = B = Q = R = 1, r = 0, h0 = 1.
pub fn scalar_example() -> LqrProblem {
    problem_from_dense(
        vec![1.0],
        vec![
            (vec![vec![1.0]], vec![vec![1.0]], vec![vec![1.0]], vec![vec![1.0]], None),
            (vec![vec![1.0]], vec![vec![1.0]], vec![vec![1.0]], vec![vec![1.0]], None),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64, q: f64, r: f64) -> LqrProblem {
        problem_from_dense(
            vec![1.0],
            vec![(vec![vec![a]], vec![vec![b]], vec![vec![q]], vec![vec![r]], None)],
        )
    }

    #[test]
    fn identity_scalar_problem_is_valid() {
        let p = scalar(1.0, 1.0, 1.0, 1.0);
        assert!(validate_problem(p, &ToleranceSet::default()).is_ok());
    }

    #[test]
    fn zero_r_violates_positive_definiteness() {
        let p = scalar(1.0, 1.0, 1.0, 0.0);
        let err = validate_problem(p, &ToleranceSet::default()).unwrap_err();
        match err {
            Error::InvalidProblem(v) => {
                assert!(matches!(v[0], Violation::NotPd { t: 1, .. }), "{v:?}")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn zero_a_is_singular() {
        let p = scalar(0.0, 1.0, 1.0, 1.0);
        let err = validate_problem(p, &ToleranceSet::default()).unwrap_err();
        match err {
            Error::InvalidProblem(v) => {
                assert!(v.iter().any(|x| matches!(x, Violation::SingularA { t: 1, .. })))
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn all_violations_are_reported_together() {
        let p = scalar(0.0, 1.0, -1.0, 0.0);
        match validate_problem(p, &ToleranceSet::default()).unwrap_err() {
            Error::InvalidProblem(v) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn asymmetric_q_is_symmetrized_with_warning() {
        let mut p = scalar(1.0, 1.0, 1.0, 1.0);
        p.state_dim = 2;
        p.control_dim = 1;
        p.h0 = DVector::from_vec(vec![1.0, 0.0]);
        p.steps[0] = StepParams {
            a: Structured::Dense(DMatrix::identity(2, 2)),
            b: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            q: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]),
            r: ActionCost::Dense(DMatrix::from_row_slice(1, 1, &[1.0])),
            affine: None,
        };
        let vp = validate_problem(p, &ToleranceSet::default()).unwrap();
        assert_eq!(vp.warnings().len(), 1);
        let q = &vp.steps[0].q;
        assert_eq!(q[(0, 1)], 0.15);
        assert_eq!(q[(1, 0)], 0.15);
    }

    #[test]
    fn cost_of_the_worked_scalar_instance() {
        let p = scalar_example();
        let states: Vec<_> = [1.0, 0.4, 0.2].iter().map(|&x| DVector::from_vec(vec![x])).collect();
        let actions: Vec<_> = [-0.6, -0.2].iter().map(|&x| DVector::from_vec(vec![x])).collect();
        let c = evaluate_cost(&p, &states, &actions).unwrap();
        assert!((c - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_actions_from_zero_state_cost_nothing() {
        let mut p = scalar_example();
        p.h0[0] = 0.0;
        let states = rollout(&p, &[DVector::zeros(1), DVector::zeros(1)]).unwrap();
        assert!(states.iter().all(|h| h.amax() == 0.0));
        let c = evaluate_cost(&p, &states, &[DVector::zeros(1), DVector::zeros(1)]).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn rollout_matches_hand_recursion() {
        let p = scalar_example();
        let u: Vec<_> = [-0.6, -0.2].iter().map(|&x| DVector::from_vec(vec![x])).collect();
        let h = rollout(&p, &u).unwrap();
        assert!((h[0][0] - 1.0).abs() < 1e-15);
        assert!((h[1][0] - 0.4).abs() < 1e-15);
        assert!((h[2][0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn identity_dynamics_hold_state_under_zero_actions() {
        let p = scalar_example();
        let h = rollout(&p, &[DVector::zeros(1), DVector::zeros(1)]).unwrap();
        assert!(h.iter().all(|x| x[0] == 1.0));
    }

    #[test]
    fn content_hash_tracks_parameter_changes() {
        let p = scalar_example();
        let h1 = p.content_hash();
        let mut p2 = p.clone();
        p2.steps[1].q[(0, 0)] += 1e-12;
        assert_ne!(h1, p2.content_hash());
        assert_eq!(h1, p.content_hash());
    }
}
