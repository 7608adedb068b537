//! Differentiation of the first-step decision map.
//!
//! The gradients of a loss on u_1 with respect to every problem parameter
//! come from two trajectories of the same dynamics: the primal solution
//! (h, u, lambda) and the solution (h~, u~, lambda~) of a second problem
//! that keeps (A, B, Q, R), zeroes the initial state, and adds the loss
//! gradient as an affine cost on the first action. Per step,
//!
//! ```text
//!   gA_t = lambda_t h~_{t-1}' + lambda~_t h_{t-1}'
//!   gB_t = lambda_t u~_t'     + lambda~_t u_t'
//!   gQ_t = (h_t h~_t' + h~_t h_t') / 2
//!   gR_t = (u_t u~_t' + u~_t u_t') / 2
//!   g_h0 = lambda~_0.
//! ```
//!
//! The production path never runs a second reverse sweep. The forward pass
//! stores the LU factors of the boundary matrix y1 and the first-step
//! injection block y2 B_1 R_1^-1 (both already produced by the reverse
//! sweep); the backward pass initializes the second trajectory from those,
//!
//! ```text
//!   lambda~_0 = y1^-1 (y3_cache * (-grad)),
//! ```
//!
//! then regenerates the two trajectories step-synchronously in one fused
//! forward sweep, accumulating the outer products above without ever
//! storing a whole trajectory.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{LuFactors, PrecisionTag};
use crate::metrics;
use crate::problem::{LqrParams, LqrProblem, LqrTrajectory, StepParams, Validated};
use crate::structured::{ActionCost, ActionInverseOp, DynamicsOp};
use crate::symplectic;

/// Per-parameter gradients. `q` and `r` entries are exactly symmetric by
/// construction; with a zero loss gradient every field is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrGradients {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub h0: DVector<f64>,
}

impl LqrGradients {
    pub fn zeros(n: usize, m: usize, horizon: usize) -> Self {
        LqrGradients {
            a: vec![DMatrix::zeros(n, n); horizon],
            b: vec![DMatrix::zeros(n, m); horizon],
            q: vec![DMatrix::zeros(n, n); horizon],
            r: vec![DMatrix::zeros(m, m); horizon],
            h0: DVector::zeros(n),
        }
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn max_abs(&self) -> f64 {
        let mats = self.a.iter().chain(&self.b).chain(&self.q).chain(&self.r);
        mats.map(|m| m.amax())
            .fold(self.h0.amax(), f64::max)
    }

    pub fn scale(&mut self, factor: f64) {
        for m in self.a.iter_mut().chain(&mut self.b).chain(&mut self.q).chain(&mut self.r) {
            *m *= factor;
        }
        self.h0 *= factor;
    }

    pub fn add(&mut self, other: &LqrGradients) {
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += y;
        }
        for (x, y) in self.b.iter_mut().zip(&other.b) {
            *x += y;
        }
        for (x, y) in self.q.iter_mut().zip(&other.q) {
            *x += y;
        }
        for (x, y) in self.r.iter_mut().zip(&other.r) {
            *x += y;
        }
        self.h0 += &other.h0;
    }

    /// Diagonal slice of gA_t, the gradient w.r.t. diagonal dynamics storage.
    pub fn a_diag(&self, t: usize) -> DVector<f64> {
        self.a[t - 1].diagonal()
    }

    /// Entry check |x - y| <= max(rel * max(|x|, |y|), abs) over all tensors.
    pub fn within(&self, other: &LqrGradients, rel: f64, abs: f64) -> bool {
        self.worst_ratio(other, rel, abs) <= 1.0
    }

    /// Largest violation ratio of the mixed tolerance; <= 1 passes.
    pub fn worst_ratio(&self, other: &LqrGradients, rel: f64, abs: f64) -> f64 {
        let mut worst = 0.0f64;
        let mut upd = |x: f64, y: f64| {
            let tol = (rel * x.abs().max(y.abs())).max(abs);
            worst = worst.max((x - y).abs() / tol);
        };
        for (ms, mo) in self
            .a
            .iter()
            .chain(&self.b)
            .chain(&self.q)
            .chain(&self.r)
            .zip(other.a.iter().chain(&other.b).chain(&other.q).chain(&other.r))
        {
            for (x, y) in ms.iter().zip(mo.iter()) {
                upd(*x, *y);
            }
        }
        for (x, y) in self.h0.iter().zip(other.h0.iter()) {
            upd(*x, *y);
        }
        worst
    }

    /// Per-tensor max absolute deviation, for reporting.
    pub fn diff_report(&self, other: &LqrGradients) -> GradientDiff {
        let block = |a: &[DMatrix<f64>], b: &[DMatrix<f64>]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).amax())
                .fold(0.0, f64::max)
        };
        GradientDiff {
            a: block(&self.a, &other.a),
            b: block(&self.b, &other.b),
            q: block(&self.q, &other.q),
            r: block(&self.r, &other.r),
            h0: (&self.h0 - &other.h0).amax(),
        }
    }

    /// Zeroes entries with no stored parameter in `p` (off-diagonals of
    /// diagonal A or R storage), so dense analytic gradients can be compared
    /// against per-parameter finite differences.
    pub fn mask_to_storage(&mut self, p: &LqrProblem) {
        for (t, step) in p.steps.iter().enumerate() {
            if matches!(step.a, crate::structured::Structured::Diag(_)) {
                let d = self.a[t].diagonal();
                self.a[t].fill(0.0);
                self.a[t].set_diagonal(&d);
            }
            if !matches!(step.r, ActionCost::Dense(_)) {
                let d = self.r[t].diagonal();
                self.r[t].fill(0.0);
                self.r[t].set_diagonal(&d);
            }
        }
    }
}

/// Max absolute deviations per tensor family.
#[derive(Debug, Clone, Copy)]
pub struct GradientDiff {
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub r: f64,
    pub h0: f64,
}

impl GradientDiff {
    pub fn max(&self) -> f64 {
        self.a.max(self.b).max(self.q).max(self.r).max(self.h0)
    }
}

/// Chain rule from a matrix-space action-cost gradient to the stored
/// reciprocal diagonal: with rho = diag(R^-1), dl/drho_j = -gR_jj / rho_j^2.
pub fn r_inverse_diag_grad(r: &ActionCost, g_r: &DMatrix<f64>) -> Option<DVector<f64>> {
    match r {
        ActionCost::DiagInverse(rho) => Some(DVector::from_fn(rho.len(), |j, _| {
            -g_r[(j, j)] / (rho[j] * rho[j])
        })),
        _ => None,
    }
}

/// Saved tensors from the forward pass: the boundary LU factors, the
/// injection block, the initial co-state, and a content hash guarding
/// against reuse across mutated parameters.
pub struct ForwardCache {
    y1_factors: LuFactors<f64>,
    y3_cache: DMatrix<f64>,
    pub lambda0: DVector<f64>,
    h0: DVector<f64>,
    problem_hash: u64,
    pub precision: PrecisionTag,
}

/// Forward pass of the decision layer: reverse sweep, boundary solve, first
/// action. Requires a problem without affine action costs (the layer
/// objective has none; general problems go through the solver directly).
pub fn forward<P: LqrParams>(
    p: &Validated<P>,
    h0: &DVector<f64>,
) -> Result<(DVector<f64>, ForwardCache)> {
    if p.has_affine() {
        return Err(Error::UnsupportedInput(
            "the cached layer path requires r_t = 0; use the solver for affine problems".into(),
        ));
    }
    let acc = symplectic::reverse_sweep(p, true)?;
    let first = symplectic::first_action(&acc, p, h0)?;
    let cache = ForwardCache {
        y1_factors: first.y1_factors,
        y3_cache: acc.y3_cache,
        lambda0: first.lambda0,
        h0: h0.clone(),
        problem_hash: p.content_hash(),
        precision: PrecisionTag::F64,
    };
    Ok((first.u1, cache))
}

/// View of the gradient problem: same step parameters, zero initial state,
/// loss gradient as the only affine action cost (at t = 1).
pub struct DualProblem<'a, P: LqrParams> {
    base: &'a P,
    loss_grad: DVector<f64>,
}

impl<'a, P: LqrParams> LqrParams for DualProblem<'a, P> {
    fn state_dim(&self) -> usize {
        self.base.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.base.control_dim()
    }
    fn horizon(&self) -> usize {
        self.base.horizon()
    }
    fn initial_state(&self) -> DVector<f64> {
        DVector::zeros(self.base.state_dim())
    }
    fn step(&self, t: usize) -> StepParams {
        let mut s = self.base.step(t);
        s.affine = if t == 1 {
            Some(self.loss_grad.clone())
        } else {
            None
        };
        s
    }
    fn has_affine(&self) -> bool {
        self.loss_grad.iter().any(|x| *x != 0.0)
    }
}

/// Wraps a validated problem as its gradient problem; validity carries over
/// because only h_0 and the affine terms change.
pub fn dual_problem<'a, P: LqrParams>(
    p: &'a Validated<P>,
    loss_grad: &DVector<f64>,
) -> Validated<DualProblem<'a, P>> {
    Validated::new_unchecked(DualProblem { base: p.params(), loss_grad: loss_grad.clone() })
}

/// Materialized gradient problem for a storage-backed instance.
pub fn build_dual(p: &LqrProblem, loss_grad: &DVector<f64>) -> LqrProblem {
    let mut dual = p.clone();
    dual.h0 = DVector::zeros(p.state_dim);
    for (idx, s) in dual.steps.iter_mut().enumerate() {
        s.affine = if idx == 0 { Some(loss_grad.clone()) } else { None };
    }
    dual
}

/// Cached backward pass: initializes the second trajectory from the saved
/// factors and runs one fused double forward sweep. No reverse sweep runs.
pub fn backward<P: LqrParams>(
    p: &Validated<P>,
    cache: &ForwardCache,
    loss_grad: &DVector<f64>,
) -> Result<LqrGradients> {
    if loss_grad.len() != p.control_dim() {
        return Err(Error::DimensionMismatch(format!(
            "loss gradient has length {}, expected {}",
            loss_grad.len(),
            p.control_dim()
        )));
    }
    if p.content_hash() != cache.problem_hash {
        return Err(Error::StaleCache);
    }
    let horizon = p.horizon();
    let n = p.state_dim();
    let m = p.control_dim();
    let mut grads = LqrGradients::zeros(n, m, horizon);

    let dual_rhs = &cache.y3_cache * (-loss_grad);
    let lambda0_dual = cache.y1_factors.solve_vec(&dual_rhs).ok_or(Error::SingularY1)?;
    grads.h0 = lambda0_dual.clone();

    // Fused double forward sweep; primal and dual trajectories are
    // regenerated step-synchronously and never stored whole.
    let mut h = cache.h0.clone();
    let mut ht = DVector::<f64>::zeros(n);
    let mut lam = cache.lambda0.clone();
    let mut lamt = lambda0_dual;
    let mut q_prev: Option<DMatrix<f64>> = None;

    for t in 1..=horizon {
        metrics::record_sweep_step();
        let step = p.step(t);
        let a_op = DynamicsOp::<f64>::new(&step.a, t)?;
        let r_op = ActionInverseOp::<f64>::new(&step.r, t)?;

        if let Some(q) = &q_prev {
            lam -= q * &h;
            lamt -= q * &ht;
        }
        lam = a_op.inv_transpose_apply(&lam, t)?;
        lamt = a_op.inv_transpose_apply(&lamt, t)?;

        grads.a[t - 1] = &lam * ht.transpose() + &lamt * h.transpose();

        let u = -r_op.apply_vec(&(step.b.transpose() * &lam), t)?;
        let mut pre_t = step.b.transpose() * &lamt;
        if t == 1 {
            pre_t += loss_grad;
        }
        let ut = -r_op.apply_vec(&pre_t, t)?;

        grads.b[t - 1] = &lam * ut.transpose() + &lamt * u.transpose();

        h = a_op.apply(&h) + &step.b * &u;
        ht = a_op.apply(&ht) + &step.b * &ut;

        grads.q[t - 1] = (&h * ht.transpose() + &ht * h.transpose()) * 0.5;
        grads.r[t - 1] = (&u * ut.transpose() + &ut * u.transpose()) * 0.5;
        q_prev = Some(step.q);
    }

    Ok(grads)
}

/// Reference backward: solve the primal and the gradient problem as two
/// independent full solves, then combine. Checks the cached path.
pub fn backward_uncached<P: LqrParams>(
    p: &Validated<P>,
    loss_grad: &DVector<f64>,
) -> Result<LqrGradients> {
    let primal = symplectic::solve(p)?;
    let dual_view = dual_problem(p, loss_grad);
    let dual = symplectic::solve(&dual_view)?;
    Ok(assemble_gradients(p.params(), &primal, &dual))
}

/// Outer-product combination of a primal and a gradient trajectory.
pub(crate) fn assemble_gradients<P: LqrParams>(
    p: &P,
    primal: &LqrTrajectory,
    dual: &LqrTrajectory,
) -> LqrGradients {
    let horizon = p.horizon();
    let mut grads = LqrGradients::zeros(p.state_dim(), p.control_dim(), horizon);
    grads.h0 = dual.costates[0].clone();
    for t in 1..=horizon {
        let lam = &primal.costates[t];
        let lamt = &dual.costates[t];
        let h_prev = &primal.states[t - 1];
        let ht_prev = &dual.states[t - 1];
        let u = &primal.actions[t - 1];
        let ut = &dual.actions[t - 1];
        let h = &primal.states[t];
        let ht = &dual.states[t];
        grads.a[t - 1] = lam * ht_prev.transpose() + lamt * h_prev.transpose();
        grads.b[t - 1] = lam * ut.transpose() + lamt * u.transpose();
        grads.q[t - 1] = (h * ht.transpose() + ht * h.transpose()) * 0.5;
        grads.r[t - 1] = (u * ut.transpose() + ut * u.transpose()) * 0.5;
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{random_problem, ConditioningSpec, RStructure};
    use crate::kkt;
    use crate::problem::{scalar_example, validate_problem, ToleranceSet};

    fn valid(p: LqrProblem) -> Validated<LqrProblem> {
        validate_problem(p, &ToleranceSet::default()).unwrap()
    }

    #[test]
    fn scalar_forward_matches_solver() {
        let vp = valid(scalar_example());
        let (u1, cache) = forward(&vp, &vp.initial_state()).unwrap();
        assert!((u1[0] + 0.6).abs() < 1e-14);
        assert!((cache.lambda0[0] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn zero_state_gives_zero_first_action() {
        let vp = valid(scalar_example());
        let (u1, _) = forward(&vp, &DVector::zeros(1)).unwrap();
        assert_eq!(u1[0], 0.0);
    }

    #[test]
    fn forward_matches_riccati_on_random_problems() {
        for seed in 0..6 {
            let p = random_problem(seed, 5, 5, 9, &ConditioningSpec::stable());
            let vp = valid(p);
            let (u1, _) = forward(&vp, &vp.initial_state()).unwrap();
            let ric = crate::riccati::solve(&vp).unwrap();
            assert!(
                (&u1 - &ric.actions[0]).amax() < 1e-10 * ric.actions[0].amax().max(1.0),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn forward_rejects_affine_problems() {
        let p = random_problem(0, 3, 3, 4, &ConditioningSpec::stable().with_affine(true));
        let vp = valid(p);
        let err = forward(&vp, &vp.initial_state()).map(|_| ()).unwrap_err();
        assert!(matches!(err, Error::UnsupportedInput(_)));
    }

    #[test]
    fn dual_problem_has_zero_state_and_single_affine_term() {
        let dual = build_dual(&scalar_example(), &DVector::from_vec(vec![1.0]));
        assert_eq!(dual.h0[0], 0.0);
        assert_eq!(dual.steps[0].affine.as_ref().unwrap()[0], 1.0);
        assert!(dual.steps[1].affine.is_none());
    }

    #[test]
    fn dual_initial_costate_matches_hand_value() {
        // For the worked scalar instance the gradient problem's lambda~_0 is
        // -3/5: the affine accumulator picks up [1 1] Sigma_2 [0, -1]' = -3
        // and the boundary matrix is 5.
        let vp = valid(scalar_example());
        let dual_view = dual_problem(&vp, &DVector::from_vec(vec![1.0]));
        let traj = symplectic::solve(&dual_view).unwrap();
        assert!((traj.costates[0][0] + 0.6).abs() < 1e-14);
    }

    #[test]
    fn scalar_backward_matches_hand_gradients() {
        let vp = valid(scalar_example());
        let (_, cache) = forward(&vp, &vp.initial_state()).unwrap();
        let g = backward(&vp, &cache, &DVector::from_vec(vec![1.0])).unwrap();
        assert!((g.h0[0] + 0.6).abs() < 1e-14);
        assert!((g.a[0][(0, 0)] + 0.6).abs() < 1e-14);
        assert!((g.a[1][(0, 0)] + 0.16).abs() < 1e-14);
        assert!((g.b[0][(0, 0)] - 0.12).abs() < 1e-14);
        assert!((g.q[0][(0, 0)] + 0.16).abs() < 1e-14);
        assert!((g.q[1][(0, 0)] + 0.04).abs() < 1e-14);
        assert!((g.r[0][(0, 0)] - 0.24).abs() < 1e-14);
        assert!((g.r[1][(0, 0)] + 0.04).abs() < 1e-14);
    }

    #[test]
    fn zero_loss_grad_gives_exactly_zero_gradients() {
        let vp = valid(scalar_example());
        let (_, cache) = forward(&vp, &vp.initial_state()).unwrap();
        let g = backward(&vp, &cache, &DVector::zeros(1)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn cached_backward_runs_zero_reverse_sweeps() {
        let p = random_problem(4, 4, 4, 8, &ConditioningSpec::stable());
        let vp = valid(p);
        let (_, cache) = forward(&vp, &vp.initial_state()).unwrap();
        let lg = DVector::from_fn(4, |i, _| 0.5 - i as f64 * 0.3);
        let ((), d) = metrics::with_counts(|| {
            backward(&vp, &cache, &lg).unwrap();
        });
        assert_eq!(d.reverse_sweeps, 0);

        // With diagonal structure the backward pass factorizes nothing at
        // all: it reuses the boundary factors from the forward pass.
        let p = random_problem(4, 4, 4, 8, &ConditioningSpec::diagonal());
        let vp = valid(p);
        let (_, cache) = forward(&vp, &vp.initial_state()).unwrap();
        let ((), d) = metrics::with_counts(|| {
            backward(&vp, &cache, &lg).unwrap();
        });
        assert_eq!(d.reverse_sweeps, 0);
        assert_eq!(d.dense_factorizations, 0);
        assert_eq!(d.sweep_steps, 8);
    }

    #[test]
    fn cached_and_uncached_backward_agree() {
        for seed in 0..6 {
            let n = 2 + seed as usize % 3;
            let p = random_problem(seed, n, n, 6, &ConditioningSpec::stable());
            let vp = valid(p);
            let (_, cache) = forward(&vp, &vp.initial_state()).unwrap();
            let lg = DVector::from_fn(n, |i, _| (i as f64 + 1.0) * 0.4 - 1.0);
            let cached = backward(&vp, &cache, &lg).unwrap();
            let uncached = backward_uncached(&vp, &lg).unwrap();
            assert!(
                cached.within(&uncached, 1e-10, 1e-14),
                "seed {seed}: {:?}",
                cached.diff_report(&uncached)
            );
        }
    }

    #[test]
    fn backward_matches_dense_oracle() {
        for seed in 0..6 {
            let n = 1 + seed as usize % 4;
            let t = 1 + seed as usize % 6;
            let p = random_problem(seed, n, n, t, &ConditioningSpec::stable());
            let vp = valid(p);
            let (_, cache) = forward(&vp, &vp.initial_state()).unwrap();
            let lg = DVector::from_fn(n, |i, _| 1.0 / (i as f64 + 1.0));
            let cached = backward(&vp, &cache, &lg).unwrap();
            let oracle = kkt::gradients(&vp, &lg).unwrap();
            assert!(
                cached.within(&oracle, 1e-8, 1e-12),
                "seed {seed}: {:?}",
                cached.diff_report(&oracle)
            );
        }
    }

    #[test]
    fn gradients_are_linear_in_the_loss_gradient() {
        let p = random_problem(7, 3, 3, 5, &ConditioningSpec::stable());
        let vp = valid(p);
        let (_, cache) = forward(&vp, &vp.initial_state()).unwrap();
        let g1 = DVector::from_vec(vec![1.0, 0.0, -0.5]);
        let g2 = DVector::from_vec(vec![0.2, 2.0, 0.1]);
        let ga = backward(&vp, &cache, &g1).unwrap();
        let gb = backward(&vp, &cache, &g2).unwrap();
        let gsum = backward(&vp, &cache, &(&g1 + &g2)).unwrap();
        let mut manual = ga.clone();
        manual.add(&gb);
        assert!(manual.within(&gsum, 1e-10, 1e-13));

        let mut scaled = ga.clone();
        scaled.scale(3.0);
        let g3 = backward(&vp, &cache, &(&g1 * 3.0)).unwrap();
        assert!(scaled.within(&g3, 1e-10, 1e-13));
    }

    #[test]
    fn stale_cache_is_detected() {
        let p = random_problem(2, 3, 3, 4, &ConditioningSpec::stable());
        let vp = valid(p.clone());
        let (_, cache) = forward(&vp, &vp.initial_state()).unwrap();
        let mut mutated = p;
        mutated.steps[2].b[(0, 0)] += 1e-9;
        let vp2 = valid(mutated);
        let err = backward(&vp2, &cache, &DVector::zeros(3)).unwrap_err();
        assert_eq!(err, Error::StaleCache);
    }

    #[test]
    fn inverse_storage_chain_rule_matches_fd() {
        let spec = ConditioningSpec {
            r_structure: RStructure::DiagInverse,
            ..ConditioningSpec::stable()
        };
        let p = random_problem(3, 3, 3, 4, &spec);
        let vp = valid(p.clone());
        let (_, cache) = forward(&vp, &vp.initial_state()).unwrap();
        let lg = DVector::from_vec(vec![0.8, -0.3, 0.5]);
        let analytic = backward(&vp, &cache, &lg).unwrap();

        // FD directly in the stored reciprocal parameter.
        let t_probe = 2usize;
        let j = 1usize;
        let eps = 1e-6;
        let mut up = p.clone();
        let mut dn = p.clone();
        if let ActionCost::DiagInverse(d) = &mut up.steps[t_probe].r {
            d[j] += eps;
        }
        if let ActionCost::DiagInverse(d) = &mut dn.steps[t_probe].r {
            d[j] -= eps;
        }
        let u_up = crate::riccati::solve(&valid(up)).unwrap().actions[0].clone();
        let u_dn = crate::riccati::solve(&valid(dn)).unwrap().actions[0].clone();
        let fd = (lg.dot(&u_up) - lg.dot(&u_dn)) / (2.0 * eps);

        let rho_grad =
            r_inverse_diag_grad(&p.steps[t_probe].r, &analytic.r[t_probe]).unwrap();
        assert!(
            (rho_grad[j] - fd).abs() <= 1e-4 * fd.abs().max(1e-7),
            "chain {} vs fd {}",
            rho_grad[j],
            fd
        );
    }
}
