//! Fast solver built on products of symplectic step matrices.
//!
//! Eliminating actions from the optimality conditions couples state and
//! co-state into one linear recursion per step,
//!
//! ```text
//!   [h_t; lambda_t] = S_t [h_{t-1}; lambda_{t-1}] + [-B_t R_t^-1 r_t; 0],
//! ```
//!
//! where S_t is symplectic (S' J S = J). Its inverse transpose
//!
//! ```text
//!   Sigma_t = [ (A_t')^-1           (A_t')^-1 Q_{t-1}          ]
//!             [ G_t (A_t')^-1       A_t + G_t (A_t')^-1 Q_{t-1} ],   G_t = B_t R_t^-1 B_t',
//! ```
//!
//! turns the two-point boundary problem into a cumulative row-block product:
//! starting from [y1 y2] = [I Q_T] and multiplying by Sigma_t from the right
//! for t = T..1 yields the boundary solve
//!
//! ```text
//!   lambda_0 = y1^-1 (y2 h_0 + y3),
//!   u_1 = -R_1^-1 (B_1' (A_1')^-1 lambda_0 + r_1).
//! ```
//!
//! Sigma_t is never materialized: the update streams three factors,
//!
//! ```text
//!   y3p = y2 B_t R_t^-1,   y1 <- (y1 + y3p B_t') (A_t')^-1,
//!   y2 <- y2 A_t + y1 Q_{t-1},
//! ```
//!
//! so diagonal A and R leave a single dense factorization per solve (the
//! boundary y1). The affine accumulator picks up y3 -= y3p r_t before each
//! step's update; the y3p block at t = 1 is kept, since it initializes the
//! backward pass of the differentiable layer.
//!
//! Because symplectic eigenvalues come in reciprocal pairs, long products
//! overflow. Each row is therefore rescaled after every step by
//! d_i = max(||y1_i||_1, ||y2_i||_1), which leaves y1^-1 (y2 h + y3)
//! unchanged. Rows never interact until the boundary solve, so the sweep can
//! also run over independent row blocks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    mat_to, mat_to_f64, vec_to_f64, LuFactors, Precision, PrecisionTag,
};
use crate::metrics;
use crate::problem::{evaluate_cost, LqrParams, LqrTrajectory, Validated};
use crate::structured::{ActionInverseOp, DynamicsOp};

/// Result of the reverse sweep. `y1` and `y2` are the row blocks entering
/// the boundary solve, `y3` the affine accumulator, and `y3_cache` the
/// control-injection block y2 B_1 R_1^-1 captured at t = 1 before the final
/// step update (reused by the cached backward pass).
#[derive(Debug, Clone)]
pub struct SymplecticAccumulator {
    pub y1: DMatrix<f64>,
    pub y2: DMatrix<f64>,
    pub y3: DVector<f64>,
    pub y3_cache: DMatrix<f64>,
    /// Sum of ln(d_i) over all applied row rescalings, one entry per row.
    pub log_scales: DVector<f64>,
    pub normalized: bool,
}

/// Output of the boundary solve: the first decision, the initial co-state,
/// and the retained factors of y1.
pub struct FirstAction {
    pub u1: DVector<f64>,
    pub lambda0: DVector<f64>,
    pub y1_factors: LuFactors<f64>,
}

struct RowSweep<T: Precision> {
    y1: DMatrix<T>,
    y2: DMatrix<T>,
    y3: DVector<T>,
    y3_cache: Option<DMatrix<T>>,
    log_scales: DVector<T>,
}

/// Runs the reverse sweep over one row block (`rows` selects the rows of
/// [I Q_T] the block starts from). Each invocation counts T sweep steps.
fn sweep_rows<T: Precision, P: LqrParams>(
    p: &P,
    normalize: bool,
    rows: std::ops::Range<usize>,
) -> Result<RowSweep<T>> {
    let n = p.state_dim();
    let horizon = p.horizon();
    let width = rows.len();

    let mut step = p.step(horizon);
    let mut y1 = DMatrix::<T>::zeros(width, n);
    for (local, global) in rows.clone().enumerate() {
        y1[(local, global)] = T::one();
    }
    let mut y2 = mat_to::<T>(&step.q).rows(rows.start, width).into_owned();
    let mut y3 = DVector::<T>::zeros(width);
    let mut y3_cache = None;
    let mut log_scales = DVector::<T>::zeros(width);

    for t in (1..=horizon).rev() {
        metrics::record_sweep_step();
        let a_op = DynamicsOp::<T>::new(&step.a, t)?;
        let r_op = ActionInverseOp::<T>::new(&step.r, t)?;
        let b = mat_to::<T>(&step.b);

        // Streamed three-factor update of [y1 y2] <- [y1 y2] Sigma_t.
        let y3p = r_op.right_apply(&(&y2 * &b), t)?;
        if let Some(r_lin) = &step.affine {
            // Affine pickup happens before this step's update: the
            // coefficient of the t-th injection is the product of the
            // later Sigma factors only.
            y3 -= &y3p * r_lin.map(T::of);
        }
        if t == 1 {
            y3_cache = Some(y3p.clone());
        }
        y1 = a_op.right_inv_transpose(&(y1 + &y3p * b.transpose()), t)?;
        let step_prev = if t > 1 { Some(p.step(t - 1)) } else { None };
        y2 = a_op.right_mul(&y2);
        if let Some(prev) = &step_prev {
            y2 += &y1 * mat_to::<T>(&prev.q);
        }

        if normalize {
            for i in 0..width {
                let d = y1.row(i).iter().fold(T::zero(), |acc, x| acc + x.abs()).max(
                    y2.row(i).iter().fold(T::zero(), |acc, x| acc + x.abs()),
                );
                if d > T::zero() && d.is_finite() {
                    let inv = T::one() / d;
                    y1.row_mut(i).scale_mut(inv);
                    y2.row_mut(i).scale_mut(inv);
                    y3[i] *= inv;
                    if let Some(cache) = &mut y3_cache {
                        cache.row_mut(i).scale_mut(inv);
                    }
                    log_scales[i] += d.ln();
                }
            }
        }
        let finite = y1.iter().all(|x| x.is_finite())
            && y2.iter().all(|x| x.is_finite())
            && y3.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFiniteAccumulator { t });
        }
        if let Some(prev) = step_prev {
            step = prev;
        }
    }

    Ok(RowSweep { y1, y2, y3, y3_cache, log_scales })
}

fn finish_sweep<T: Precision>(parts: Vec<RowSweep<T>>, normalized: bool) -> SymplecticAccumulator {
    let total_rows: usize = parts.iter().map(|p| p.y1.nrows()).sum();
    let n = parts[0].y1.ncols();
    let m = parts[0].y3_cache.as_ref().map(|c| c.ncols()).unwrap_or(0);
    let mut y1 = DMatrix::zeros(total_rows, n);
    let mut y2 = DMatrix::zeros(total_rows, n);
    let mut y3 = DVector::zeros(total_rows);
    let mut y3_cache = DMatrix::zeros(total_rows, m);
    let mut log_scales = DVector::zeros(total_rows);
    let mut row = 0;
    for part in parts {
        let w = part.y1.nrows();
        y1.rows_mut(row, w).copy_from(&mat_to_f64(&part.y1));
        y2.rows_mut(row, w).copy_from(&mat_to_f64(&part.y2));
        y3.rows_mut(row, w).copy_from(&vec_to_f64(&part.y3));
        if let Some(cache) = part.y3_cache {
            y3_cache.rows_mut(row, w).copy_from(&mat_to_f64(&cache));
        }
        log_scales
            .rows_mut(row, w)
            .copy_from(&vec_to_f64(&part.log_scales));
        row += w;
    }
    SymplecticAccumulator { y1, y2, y3, y3_cache, log_scales, normalized }
}

/// Reverse sweep over the whole row space. Counts one reverse sweep and T
/// sweep steps.
pub fn reverse_sweep<P: LqrParams>(
    p: &Validated<P>,
    normalize: bool,
) -> Result<SymplecticAccumulator> {
    reverse_sweep_with::<f64, P>(p, normalize)
}

pub fn reverse_sweep_with<T: Precision, P: LqrParams>(
    p: &Validated<P>,
    normalize: bool,
) -> Result<SymplecticAccumulator> {
    metrics::record_reverse_sweep();
    let n = p.state_dim();
    let part = sweep_rows::<T, P>(p.params(), normalize, 0..n)?;
    Ok(finish_sweep(vec![part], normalize))
}

/// Reverse sweep split into independent row blocks of at most `block_rows`
/// rows, each normalized on its own. Row rescaling is per-row, so the
/// concatenated result matches the monolithic sweep.
pub fn reverse_sweep_blocked<P: LqrParams>(
    p: &Validated<P>,
    normalize: bool,
    block_rows: usize,
) -> Result<SymplecticAccumulator> {
    metrics::record_reverse_sweep();
    let n = p.state_dim();
    let block = block_rows.max(1);
    let ranges: Vec<_> = (0..n.div_ceil(block))
        .map(|i| (i * block)..((i + 1) * block).min(n))
        .collect();
    let parts = ranges
        .into_iter()
        .map(|r| sweep_rows::<f64, P>(p.params(), normalize, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(finish_sweep(parts, normalize))
}

/// Boundary solve: factors y1 once (the single dense factorization of the
/// structured path), then recovers lambda_0 and the first decision.
pub fn first_action<P: LqrParams>(
    acc: &SymplecticAccumulator,
    p: &Validated<P>,
    h0: &DVector<f64>,
) -> Result<FirstAction> {
    if h0.len() != p.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "h0 has length {}, expected {}",
            h0.len(),
            p.state_dim()
        )));
    }
    let factors = LuFactors::new(acc.y1.clone());
    if factors.is_singular() {
        return Err(Error::SingularY1);
    }
    let rhs = &acc.y2 * h0 + &acc.y3;
    let lambda0 = factors.solve_vec(&rhs).ok_or(Error::SingularY1)?;

    let step1 = p.step(1);
    let a_op = DynamicsOp::<f64>::new(&step1.a, 1)?;
    let r_op = ActionInverseOp::<f64>::new(&step1.r, 1)?;
    let lambda1 = a_op.inv_transpose_apply(&lambda0, 1)?;
    let mut pre = step1.b.transpose() * &lambda1;
    if let Some(r_lin) = &step1.affine {
        pre += r_lin;
    }
    let u1 = -r_op.apply_vec(&pre, 1)?;
    Ok(FirstAction { u1, lambda0, y1_factors: factors })
}

/// Forward sweep from (h_0, lambda_0): per step
/// lambda_t = (A_t')^-1 (lambda_{t-1} - Q_{t-1} h_{t-1}),
/// u_t = -R_t^-1 (B_t' lambda_t + r_t), h_t = A_t h_{t-1} + B_t u_t.
pub fn forward_sweep<P: LqrParams>(
    p: &Validated<P>,
    h0: &DVector<f64>,
    lambda0: &DVector<f64>,
) -> Result<LqrTrajectory> {
    forward_sweep_with::<f64, P>(p, h0, lambda0)
}

pub fn forward_sweep_with<T: Precision, P: LqrParams>(
    p: &Validated<P>,
    h0: &DVector<f64>,
    lambda0: &DVector<f64>,
) -> Result<LqrTrajectory> {
    let horizon = p.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut costates = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);

    let mut h = h0.map(T::of);
    let mut lam = lambda0.map(T::of);
    states.push(vec_to_f64(&h));
    costates.push(vec_to_f64(&lam));
    let mut q_prev: Option<DMatrix<T>> = None;

    for t in 1..=horizon {
        metrics::record_sweep_step();
        let step = p.step(t);
        let a_op = DynamicsOp::<T>::new(&step.a, t)?;
        let r_op = ActionInverseOp::<T>::new(&step.r, t)?;
        let b = mat_to::<T>(&step.b);

        let adj = match &q_prev {
            Some(q) => &lam - q * &h,
            None => lam.clone(),
        };
        lam = a_op.inv_transpose_apply(&adj, t)?;
        let mut pre = b.transpose() * &lam;
        if let Some(r_lin) = &step.affine {
            pre += r_lin.map(T::of);
        }
        let u = -r_op.apply_vec(&pre, t)?;
        h = a_op.apply(&h) + &b * &u;

        states.push(vec_to_f64(&h));
        costates.push(vec_to_f64(&lam));
        actions.push(vec_to_f64(&u));
        q_prev = Some(mat_to::<T>(&step.q));
    }

    let cost = evaluate_cost(p.params(), &states, &actions)?;
    Ok(LqrTrajectory { states, actions, costates, cost })
}

/// Full solve: one reverse sweep, one boundary factorization, one forward
/// sweep. Row normalization is always on here; the unnormalized path exists
/// for stress tests via [`reverse_sweep`].
pub fn solve<P: LqrParams>(p: &Validated<P>) -> Result<LqrTrajectory> {
    solve_with(p, PrecisionTag::F64)
}

pub fn solve_with<P: LqrParams>(p: &Validated<P>, precision: PrecisionTag) -> Result<LqrTrajectory> {
    match precision {
        PrecisionTag::F64 => {
            let acc = reverse_sweep_with::<f64, P>(p, true)?;
            let first = first_action(&acc, p, &p.initial_state())?;
            forward_sweep_with::<f64, P>(p, &p.initial_state(), &first.lambda0)
        }
        PrecisionTag::F32 => {
            // Accumulate in f32; the boundary factorization runs at or above
            // the accumulator precision (f64 here, it is the single dense
            // solve and dominates the error budget).
            let acc = reverse_sweep_with::<f32, P>(p, true)?;
            let first = first_action(&acc, p, &p.initial_state())?;
            forward_sweep_with::<f32, P>(p, &p.initial_state(), &first.lambda0)
        }
    }
}

/// Which step matrix to materialize for inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMatrix {
    /// The forward transition S_t acting on [h; lambda] columns.
    Forward,
    /// The reverse factor Sigma_t = (S_t^-1)' acting on row blocks.
    Reverse,
}

/// Explicit 2n x 2n step matrix; a testing aid, never on the solve path.
pub fn materialize_step<P: LqrParams>(
    p: &Validated<P>,
    t: usize,
    which: StepMatrix,
) -> Result<DMatrix<f64>> {
    if t == 0 || t > p.horizon() {
        return Err(Error::IndexOutOfRange { index: t, len: p.horizon() });
    }
    let n = p.state_dim();
    let step = p.step(t);
    let a = step.a.to_dense();
    let a_inv_t = a
        .clone()
        .try_inverse()
        .ok_or(Error::SingularA { t })?
        .transpose();
    let r_inv = match &step.r {
        crate::structured::ActionCost::Dense(m) => {
            m.clone().try_inverse().ok_or(Error::FactorizationFailure { t })?
        }
        other => other.to_dense().try_inverse().ok_or(Error::FactorizationFailure { t })?,
    };
    let g = &step.b * r_inv * step.b.transpose();
    let q_prev = if t > 1 { p.step(t - 1).q.clone() } else { DMatrix::zeros(n, n) };

    let mut out = DMatrix::zeros(2 * n, 2 * n);
    match which {
        StepMatrix::Reverse => {
            out.view_mut((0, 0), (n, n)).copy_from(&a_inv_t);
            out.view_mut((0, n), (n, n)).copy_from(&(&a_inv_t * &q_prev));
            out.view_mut((n, 0), (n, n)).copy_from(&(&g * &a_inv_t));
            out.view_mut((n, n), (n, n)).copy_from(&(&a + &g * &a_inv_t * &q_prev));
        }
        StepMatrix::Forward => {
            out.view_mut((0, 0), (n, n)).copy_from(&(&a + &g * &a_inv_t * &q_prev));
            out.view_mut((0, n), (n, n)).copy_from(&(-(&g * &a_inv_t)));
            out.view_mut((n, 0), (n, n)).copy_from(&(-(&a_inv_t * &q_prev)));
            out.view_mut((n, n), (n, n)).copy_from(&a_inv_t);
        }
    }
    Ok(out)
}

/// || M' J M - J ||_max, the symplecticity residual.
pub fn symplectic_residual(m: &DMatrix<f64>) -> f64 {
    let two_n = m.nrows();
    let n = two_n / 2;
    let mut j = DMatrix::zeros(two_n, two_n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    (m.transpose() * &j * m - &j).amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{random_problem, ConditioningSpec};
    use crate::problem::{scalar_example, validate_problem, LqrProblem, ToleranceSet};
    use crate::riccati;

    fn valid(p: LqrProblem) -> Validated<LqrProblem> {
        validate_problem(p, &ToleranceSet::default()).unwrap()
    }

    #[test]
    fn scalar_row_block_matches_hand_product() {
        // [1 1] Sigma_2 Sigma_1 = [5 3] with Sigma_1 = [[1,0],[1,1]],
        // Sigma_2 = [[1,1],[1,2]].
        let vp = valid(scalar_example());
        let acc = reverse_sweep(&vp, false).unwrap();
        assert!((acc.y1[(0, 0)] - 5.0).abs() < 1e-14);
        assert!((acc.y2[(0, 0)] - 3.0).abs() < 1e-14);
        assert_eq!(acc.y3[0], 0.0);

        let s1 = materialize_step(&vp, 1, StepMatrix::Reverse).unwrap();
        assert_eq!(s1[(0, 0)], 1.0);
        assert_eq!(s1[(0, 1)], 0.0);
        assert_eq!(s1[(1, 0)], 1.0);
        assert_eq!(s1[(1, 1)], 1.0);
        let s2 = materialize_step(&vp, 2, StepMatrix::Reverse).unwrap();
        assert_eq!(s2[(0, 1)], 1.0);
        assert_eq!(s2[(1, 1)], 2.0);
    }

    #[test]
    fn scalar_first_action_matches_riccati() {
        let vp = valid(scalar_example());
        let acc = reverse_sweep(&vp, true).unwrap();
        let fa = first_action(&acc, &vp, &vp.initial_state()).unwrap();
        assert!((fa.lambda0[0] - 0.6).abs() < 1e-14);
        assert!((fa.u1[0] + 0.6).abs() < 1e-14);
    }

    #[test]
    fn scalar_forward_sweep_reproduces_trajectory() {
        let vp = valid(scalar_example());
        let lam0 = DVector::from_vec(vec![0.6]);
        let traj = forward_sweep(&vp, &vp.initial_state(), &lam0).unwrap();
        let l: Vec<f64> = traj.costates.iter().map(|x| x[0]).collect();
        assert!((l[1] - 0.6).abs() < 1e-14);
        assert!((l[2] - 0.2).abs() < 1e-14);
        assert!((traj.states[2][0] - 0.2).abs() < 1e-14);
        assert!((traj.actions[0][0] + 0.6).abs() < 1e-14);
        // terminal identity lambda_T = Q_T h_T
        assert!((l[2] - traj.states[2][0]).abs() < 1e-14);
    }

    #[test]
    fn zero_terminal_cost_single_step() {
        let mut p = scalar_example();
        p.horizon = 1;
        p.steps.truncate(1);
        p.steps[0].q = DMatrix::zeros(1, 1);
        p.steps[0].affine = Some(DVector::from_vec(vec![0.5]));
        let vp = valid(p);
        let acc = reverse_sweep(&vp, false).unwrap();
        assert_eq!(acc.y2[(0, 0)], 0.0);
        let fa = first_action(&acc, &vp, &vp.initial_state()).unwrap();
        assert_eq!(fa.lambda0[0], 0.0);
        assert!((fa.u1[0] + 0.5).abs() < 1e-15); // u1 = -R^-1 r_1
    }

    #[test]
    fn all_zero_cost_gives_zero_control() {
        let mut p = scalar_example();
        for s in &mut p.steps {
            s.q = DMatrix::zeros(1, 1);
        }
        let vp = valid(p);
        let acc = reverse_sweep(&vp, true).unwrap();
        assert_eq!(acc.y2.amax(), 0.0);
        let fa = first_action(&acc, &vp, &vp.initial_state()).unwrap();
        assert_eq!(fa.lambda0[0], 0.0);
        assert_eq!(fa.u1[0], 0.0);
    }

    #[test]
    fn normalized_rows_have_unit_max_norm() {
        let p = random_problem(3, 6, 4, 12, &ConditioningSpec::stable());
        let vp = valid(p);
        let acc = reverse_sweep(&vp, true).unwrap();
        for i in 0..6 {
            let n1: f64 = acc.y1.row(i).iter().map(|x| x.abs()).sum();
            let n2: f64 = acc.y2.row(i).iter().map(|x| x.abs()).sum();
            assert!((n1.max(n2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_matches_riccati_on_scalar_and_random() {
        let vp = valid(scalar_example());
        let a = solve(&vp).unwrap();
        let b = riccati::solve(&vp).unwrap();
        assert!((a.cost - b.cost).abs() < 1e-12);

        let p = random_problem(3, 8, 8, 32, &ConditioningSpec::stable().with_affine(true));
        let vp = valid(p);
        let a = solve(&vp).unwrap();
        let b = riccati::solve(&vp).unwrap();
        let scale = b.cost.abs().max(1.0);
        assert!((a.cost - b.cost).abs() / scale < 1e-8);
        for t in 0..=32 {
            assert!((&a.states[t] - &b.states[t]).amax() < 1e-8 * b.states[t].amax().max(1.0));
            assert!(
                (&a.costates[t] - &b.costates[t]).amax() < 1e-8 * b.costates[t].amax().max(1.0)
            );
        }
    }

    #[test]
    fn diagonal_problems_factor_once_per_solve() {
        let p = random_problem(5, 8, 8, 16, &ConditioningSpec::diagonal());
        let vp = valid(p);
        let (_, d) = metrics::with_counts(|| solve(&vp).unwrap());
        assert_eq!(d.dense_factorizations, 1);
        assert_eq!(d.reverse_sweeps, 1);
        assert_eq!(d.sweep_steps, 32); // 16 reverse + 16 forward
    }

    #[test]
    fn step_matrices_are_symplectic_and_mutually_inverse_transpose() {
        let p = random_problem(11, 4, 3, 6, &ConditioningSpec::stable());
        let vp = valid(p);
        for t in 1..=6 {
            let sigma = materialize_step(&vp, t, StepMatrix::Reverse).unwrap();
            let s = materialize_step(&vp, t, StepMatrix::Forward).unwrap();
            assert!(symplectic_residual(&sigma) < 1e-10, "t={t}");
            assert!(symplectic_residual(&s) < 1e-10, "t={t}");
            let inv_t = s.clone().try_inverse().unwrap().transpose();
            assert!((sigma.clone() - inv_t).amax() < 1e-10);
            let det = sigma.determinant();
            assert!((det - 1.0).abs() < 1e-8 * det.abs().max(1.0));
        }
    }

    #[test]
    fn blocked_sweep_matches_monolithic() {
        let p = random_problem(17, 9, 5, 20, &ConditioningSpec::stable().with_affine(true));
        let vp = valid(p);
        let mono = reverse_sweep(&vp, true).unwrap();
        for block in [1usize, 2, 4, 9] {
            let blocked = reverse_sweep_blocked(&vp, true, block).unwrap();
            assert!((&blocked.y1 - &mono.y1).amax() < 1e-14);
            assert!((&blocked.y2 - &mono.y2).amax() < 1e-14);
            assert!((&blocked.y3 - &mono.y3).amax() < 1e-14);
            let fa_m = first_action(&mono, &vp, &vp.initial_state()).unwrap();
            let fa_b = first_action(&blocked, &vp, &vp.initial_state()).unwrap();
            assert!(
                (&fa_m.lambda0 - &fa_b.lambda0).amax()
                    < 1e-10 * fa_m.lambda0.amax().max(1.0)
            );
        }
    }

    #[test]
    fn normalization_neutrality_on_stable_problems() {
        for seed in 0..6 {
            let p = random_problem(seed, 5, 5, 24, &ConditioningSpec::stable().with_affine(seed % 2 == 0));
            let vp = valid(p);
            let on = reverse_sweep(&vp, true).unwrap();
            let off = reverse_sweep(&vp, false).unwrap();
            let h0 = vp.initial_state();
            let lam_on = first_action(&on, &vp, &h0).unwrap().lambda0;
            let lam_off = first_action(&off, &vp, &h0).unwrap().lambda0;
            assert!(
                (&lam_on - &lam_off).amax() < 1e-8 * lam_on.amax().max(1e-12),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn unstable_long_horizon_overflows_without_normalization() {
        let p = random_problem(0, 4, 4, 2048, &ConditioningSpec::unstable(1.5));
        let vp = valid(p);
        let err = reverse_sweep(&vp, false).unwrap_err();
        assert!(matches!(err, Error::NonFiniteAccumulator { .. }), "{err:?}");

        let acc = reverse_sweep(&vp, true).unwrap();
        let lam0 = first_action(&acc, &vp, &vp.initial_state()).unwrap().lambda0;
        let ric = riccati::solve(&vp).unwrap();
        let rel = (&lam0 - &ric.costates[0]).amax() / ric.costates[0].amax().max(1e-12);
        assert!(rel < 1e-4, "relative deviation {rel}");
    }

    #[test]
    fn f32_solve_tracks_f64() {
        let p = random_problem(13, 6, 6, 12, &ConditioningSpec::diagonal());
        let vp = valid(p);
        let a = solve(&vp).unwrap();
        let b = solve_with(&vp, PrecisionTag::F32).unwrap();
        assert!((a.cost - b.cost).abs() / a.cost.abs().max(1.0) < 1e-3);
    }
}
