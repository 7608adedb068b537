//! Brute-force verification oracle: the stacked first-order system.
//!
//! With x = (h_0..h_T, u_1..u_T) and xi = (lambda_0..lambda_T), optimality of
//! the constrained quadratic program is one indefinite linear system
//!
//! ```text
//!   [ C  F' ] [ x  ]   [ -r_x ]
//!   [ F  0  ] [ xi ] = [  b   ],
//! ```
//!
//! where C is block diagonal with a zero block for h_0, (Q_t + Q_t')/2 for
//! the states and (R_t + R_t')/2 for the actions; F stacks -I, the A_t
//! sub-diagonal and the B_t action columns; b carries -h_init in its first
//! block; and r_x places the affine action costs at the action slots.
//!
//! Differentiating that system in its parameters shows that the parameter
//! gradients of any loss on u_1 combine this primal solution with the
//! solution of a second system that differs only in its right-hand side
//! (the loss gradient at the u_1 slot). Both solves share one
//! factorization here.
//!
//! Everything is assembled densely and solved directly, capped at desk
//! scale. Clarity over speed: this module exists to check the fast paths,
//! including by central finite differences.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{assemble_gradients, LqrGradients};
use crate::error::{Error, Result};
use crate::linalg::LuFactors;
use crate::metrics;
use crate::problem::{
    evaluate_cost, LqrParams, LqrProblem, LqrTrajectory, Validated,
};
use crate::riccati;
use crate::structured::ActionCost;

/// Cap on the primal dimension (T+1)n + Tm of assembled systems.
pub const MAX_PRIMAL_ROWS: usize = 5000;

/// Dense stacked optimality system with index maps into the flat layout.
#[derive(Debug, Clone)]
pub struct DenseKktSystem {
    /// Block-diagonal cost matrix C.
    pub cost: DMatrix<f64>,
    /// Constraint matrix F.
    pub constraints: DMatrix<f64>,
    /// Constraint right-hand side b (first block is -h_init).
    pub rhs: DVector<f64>,
    /// Affine cost vector r_x entering stationarity.
    pub lin: DVector<f64>,
    state_dim: usize,
    control_dim: usize,
    horizon: usize,
}

impl DenseKktSystem {
    /// Offset of h_t within x, 0 <= t <= T.
    pub fn state_offset(&self, t: usize) -> usize {
        t * self.state_dim
    }

    /// Offset of u_t within x, 1 <= t <= T.
    pub fn action_offset(&self, t: usize) -> usize {
        (self.horizon + 1) * self.state_dim + (t - 1) * self.control_dim
    }

    /// Offset of lambda_t within xi, 0 <= t <= T.
    pub fn costate_offset(&self, t: usize) -> usize {
        t * self.state_dim
    }

    pub fn primal_dim(&self) -> usize {
        (self.horizon + 1) * self.state_dim + self.horizon * self.control_dim
    }

    pub fn dual_dim(&self) -> usize {
        (self.horizon + 1) * self.state_dim
    }

    /// The full saddle matrix [[C, F'], [F, 0]].
    pub fn saddle_matrix(&self) -> DMatrix<f64> {
        let nx = self.primal_dim();
        let nc = self.dual_dim();
        let mut m = DMatrix::zeros(nx + nc, nx + nc);
        m.view_mut((0, 0), (nx, nx)).copy_from(&self.cost);
        m.view_mut((0, nx), (nx, nc)).copy_from(&self.constraints.transpose());
        m.view_mut((nx, 0), (nc, nx)).copy_from(&self.constraints);
        m
    }

    fn unpack(&self, sol: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let nx = self.primal_dim();
        let n = self.state_dim;
        let m = self.control_dim;
        let states = (0..=self.horizon)
            .map(|t| sol.rows(self.state_offset(t), n).into_owned())
            .collect();
        let actions = (1..=self.horizon)
            .map(|t| sol.rows(self.action_offset(t), m).into_owned())
            .collect();
        let costates = (0..=self.horizon)
            .map(|t| sol.rows(nx + self.costate_offset(t), n).into_owned())
            .collect();
        (states, actions, costates)
    }
}

/// Assembles the dense system. Fails with `TooLarge` above the desk-scale
/// cap and is independent of h_0 except through b.
pub fn assemble<P: LqrParams>(p: &Validated<P>) -> Result<DenseKktSystem> {
    let n = p.state_dim();
    let m = p.control_dim();
    let horizon = p.horizon();
    let nx = (horizon + 1) * n + horizon * m;
    if nx > MAX_PRIMAL_ROWS {
        return Err(Error::TooLarge { rows: nx, cap: MAX_PRIMAL_ROWS });
    }
    let nc = (horizon + 1) * n;

    let mut cost = DMatrix::zeros(nx, nx);
    let mut constraints = DMatrix::zeros(nc, nx);
    let mut rhs = DVector::zeros(nc);
    let mut lin = DVector::zeros(nx);

    let sys = DenseKktSystem {
        cost: DMatrix::zeros(0, 0),
        constraints: DMatrix::zeros(0, 0),
        rhs: DVector::zeros(0),
        lin: DVector::zeros(0),
        state_dim: n,
        control_dim: m,
        horizon,
    };

    // lambda_0 row block: -h_0 = -h_init.
    for i in 0..n {
        constraints[(i, i)] = -1.0;
    }
    rhs.rows_mut(0, n).copy_from(&(-p.initial_state()));

    for t in 1..=horizon {
        let step = p.step(t);
        let so = sys.state_offset(t);
        let ao = sys.action_offset(t);
        let co = sys.costate_offset(t);

        let q_sym = (&step.q + step.q.transpose()) * 0.5;
        cost.view_mut((so, so), (n, n)).copy_from(&q_sym);
        let r_dense = step.r.to_dense();
        let r_sym = (&r_dense + r_dense.transpose()) * 0.5;
        cost.view_mut((ao, ao), (m, m)).copy_from(&r_sym);

        constraints
            .view_mut((co, sys.state_offset(t - 1)), (n, n))
            .copy_from(&step.a.to_dense());
        for i in 0..n {
            constraints[(co + i, so + i)] = -1.0;
        }
        constraints.view_mut((co, ao), (n, m)).copy_from(&step.b);

        if let Some(r) = &step.affine {
            lin.rows_mut(ao, m).copy_from(r);
        }
    }

    Ok(DenseKktSystem { cost, constraints, rhs, lin, ..sys })
}

fn factor_saddle(sys: &DenseKktSystem) -> Result<LuFactors<f64>> {
    let factors = LuFactors::new(sys.saddle_matrix());
    if factors.is_singular() {
        return Err(Error::SingularKkt);
    }
    Ok(factors)
}

/// Solves the stacked system directly and unpacks the trajectory.
pub fn solve<P: LqrParams>(p: &Validated<P>) -> Result<LqrTrajectory> {
    let sys = assemble(p)?;
    let factors = factor_saddle(&sys)?;
    let mut full_rhs = DVector::zeros(sys.primal_dim() + sys.dual_dim());
    full_rhs.rows_mut(0, sys.primal_dim()).copy_from(&(-&sys.lin));
    full_rhs
        .rows_mut(sys.primal_dim(), sys.dual_dim())
        .copy_from(&sys.rhs);
    let sol = factors.solve_vec(&full_rhs).ok_or(Error::SingularKkt)?;
    let (states, actions, costates) = sys.unpack(&sol);
    let cost = evaluate_cost(p.params(), &states, &actions)?;
    Ok(LqrTrajectory { states, actions, costates, cost })
}

/// Solves both the primal system and the loss-gradient system with one
/// factorization and combines them into parameter gradients.
pub fn gradients<P: LqrParams>(
    p: &Validated<P>,
    loss_grad: &DVector<f64>,
) -> Result<LqrGradients> {
    if loss_grad.len() != p.control_dim() {
        return Err(Error::DimensionMismatch(format!(
            "loss gradient has length {}, expected {}",
            loss_grad.len(),
            p.control_dim()
        )));
    }
    let sys = assemble(p)?;
    let factors = factor_saddle(&sys)?;
    let nx = sys.primal_dim();
    let nc = sys.dual_dim();

    let mut primal_rhs = DVector::zeros(nx + nc);
    primal_rhs.rows_mut(0, nx).copy_from(&(-&sys.lin));
    primal_rhs.rows_mut(nx, nc).copy_from(&sys.rhs);
    let primal_sol = factors.solve_vec(&primal_rhs).ok_or(Error::SingularKkt)?;

    let mut grad_rhs = DVector::zeros(nx + nc);
    grad_rhs
        .rows_mut(sys.action_offset(1), p.control_dim())
        .copy_from(&(-loss_grad));
    let dual_sol = factors.solve_vec(&grad_rhs).ok_or(Error::SingularKkt)?;

    let (ph, pu, pl) = sys.unpack(&primal_sol);
    let (dh, du, dl) = sys.unpack(&dual_sol);
    let primal = LqrTrajectory { states: ph, actions: pu, costates: pl, cost: 0.0 };
    let dual = LqrTrajectory { states: dh, actions: du, costates: dl, cost: 0.0 };
    Ok(assemble_gradients(p.params(), &primal, &dual))
}

/// Residuals of the stacked optimality conditions at a trajectory, split
/// into stationarity and feasibility parts (max-norm, scaled by the data).
pub fn kkt_residuals<P: LqrParams>(p: &Validated<P>, traj: &LqrTrajectory) -> (f64, f64) {
    let horizon = p.horizon();
    let mut stationarity = 0.0f64;
    let mut feasibility = 0.0f64;
    let scale = |v: &DVector<f64>| v.amax().max(1.0);

    for t in 1..=horizon {
        let step = p.step(t);
        // d/du_t: R u + B' lambda + r = 0
        let mut res_u = step.r.to_dense() * &traj.actions[t - 1]
            + step.b.transpose() * &traj.costates[t];
        if let Some(r) = &step.affine {
            res_u += r;
        }
        stationarity = stationarity.max(res_u.amax() / scale(&traj.costates[t]));
        // d/dh_t for t < T: Q h + A_{t+1}' lambda_{t+1} - lambda_t = 0
        if t < horizon {
            let next = p.step(t + 1);
            let res_h = &step.q * &traj.states[t] + next.a.tr_mul_vec(&traj.costates[t + 1])
                - &traj.costates[t];
            stationarity = stationarity.max(res_h.amax() / scale(&traj.costates[t]));
        } else {
            let res_h = &step.q * &traj.states[t] - &traj.costates[t];
            stationarity = stationarity.max(res_h.amax() / scale(&traj.costates[t]));
        }
        // feasibility: h_t = A_t h_{t-1} + B_t u_t
        let res_f = step.a.mul_vec(&traj.states[t - 1]) + &step.b * &traj.actions[t - 1]
            - &traj.states[t];
        feasibility = feasibility.max(res_f.amax() / scale(&traj.states[t]));
    }
    // lambda_0 = A_1' lambda_1 and h_0 = h_init
    let res0 = p.step(1).a.tr_mul_vec(&traj.costates[1]) - &traj.costates[0];
    stationarity = stationarity.max(res0.amax() / scale(&traj.costates[0]));
    let resh0 = &traj.states[0] - p.initial_state();
    feasibility = feasibility.max(resh0.amax() / scale(&traj.states[0]));
    (stationarity, feasibility)
}

/// Central-difference gradients of `loss(u_1(theta))` over every stored
/// parameter entry, re-solving with the reference backend at theta +- h.
/// The step is h = rel_step * (1 + |theta|) per entry.
///
/// Gradients are reported in matrix space: for `DiagInverse` action costs
/// the perturbation is applied to R itself by adjusting the stored
/// reciprocal, so the result is comparable to the analytic dR gradients.
/// Entries without a stored parameter (off-diagonals of diagonal storage)
/// stay zero.
pub fn fd_gradients<F>(
    p: &Validated<LqrProblem>,
    loss: F,
    rel_step: f64,
) -> Result<LqrGradients>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = p.state_dim();
    let m = p.control_dim();
    let horizon = p.horizon();
    let mut out = LqrGradients::zeros(n, m, horizon);

    let solve_u1 = |prob: &LqrProblem| -> Result<DVector<f64>> {
        let vp = Validated::new_unchecked(prob.clone());
        Ok(riccati::solve(&vp)?.actions[0].clone())
    };
    let base: &LqrProblem = p.params();

    let probe = |prob: &mut LqrProblem,
                     read: &dyn Fn(&LqrProblem) -> f64,
                     write: &dyn Fn(&mut LqrProblem, f64)|
     -> Result<f64> {
        let theta = read(prob);
        let h = rel_step * (1.0 + theta.abs());
        write(prob, theta + h);
        let up = loss(&solve_u1(prob)?);
        write(prob, theta - h);
        let dn = loss(&solve_u1(prob)?);
        write(prob, theta);
        Ok((up - dn) / (2.0 * h))
    };

    let mut work = base.clone();
    for t in 0..horizon {
        // A entries
        match &base.steps[t].a {
            crate::structured::Structured::Dense(_) => {
                for i in 0..n {
                    for j in 0..n {
                        out.a[t][(i, j)] = probe(
                            &mut work,
                            &|p| match &p.steps[t].a {
                                crate::structured::Structured::Dense(a) => a[(i, j)],
                                _ => unreachable!(),
                            },
                            &|p, v| {
                                if let crate::structured::Structured::Dense(a) = &mut p.steps[t].a {
                                    a[(i, j)] = v;
                                }
                            },
                        )?;
                    }
                }
            }
            crate::structured::Structured::Diag(_) => {
                for j in 0..n {
                    out.a[t][(j, j)] = probe(
                        &mut work,
                        &|p| match &p.steps[t].a {
                            crate::structured::Structured::Diag(d) => d[j],
                            _ => unreachable!(),
                        },
                        &|p, v| {
                            if let crate::structured::Structured::Diag(d) = &mut p.steps[t].a {
                                d[j] = v;
                            }
                        },
                    )?;
                }
            }
        }
        // B entries
        for i in 0..n {
            for j in 0..m {
                out.b[t][(i, j)] = probe(
                    &mut work,
                    &|p| p.steps[t].b[(i, j)],
                    &|p, v| p.steps[t].b[(i, j)] = v,
                )?;
            }
        }
        // Q entries: perturb one entry; the solve sees the symmetrized matrix,
        // matching how an asymmetric perturbation enters the stacked system.
        for i in 0..n {
            for j in 0..n {
                let theta = base.steps[t].q[(i, j)];
                let h = rel_step * (1.0 + theta.abs());
                for (sign, slot) in [(1.0, 0), (-1.0, 1)] {
                    let _ = slot;
                    work.steps[t].q[(i, j)] = theta + sign * h;
                    let qs = (&work.steps[t].q + work.steps[t].q.transpose()) * 0.5;
                    let orig = std::mem::replace(&mut work.steps[t].q, qs);
                    let val = loss(&solve_u1(&work)?);
                    work.steps[t].q = orig;
                    if sign > 0.0 {
                        out.q[t][(i, j)] = val;
                    } else {
                        out.q[t][(i, j)] = (out.q[t][(i, j)] - val) / (2.0 * h);
                    }
                }
                work.steps[t].q[(i, j)] = theta;
            }
        }
        // R entries, always in matrix space.
        match &base.steps[t].r {
            ActionCost::Dense(_) => {
                for i in 0..m {
                    for j in 0..m {
                        let theta = match &base.steps[t].r {
                            ActionCost::Dense(r) => r[(i, j)],
                            _ => unreachable!(),
                        };
                        let h = rel_step * (1.0 + theta.abs());
                        let mut vals = [0.0f64; 2];
                        for (k, sign) in [(0usize, 1.0f64), (1, -1.0)] {
                            if let ActionCost::Dense(r) = &mut work.steps[t].r {
                                r[(i, j)] = theta + sign * h;
                                let rs = (&*r + r.transpose()) * 0.5;
                                let orig = std::mem::replace(r, rs);
                                drop(orig);
                            }
                            vals[k] = loss(&solve_u1(&work)?);
                            if let ActionCost::Dense(r) = &mut work.steps[t].r {
                                r.copy_from(match &base.steps[t].r {
                                    ActionCost::Dense(rb) => rb,
                                    _ => unreachable!(),
                                });
                            }
                        }
                        out.r[t][(i, j)] = (vals[0] - vals[1]) / (2.0 * h);
                    }
                }
            }
            ActionCost::Diag(_) => {
                for j in 0..m {
                    out.r[t][(j, j)] = probe(
                        &mut work,
                        &|p| match &p.steps[t].r {
                            ActionCost::Diag(d) => d[j],
                            _ => unreachable!(),
                        },
                        &|p, v| {
                            if let ActionCost::Diag(d) = &mut p.steps[t].r {
                                d[j] = v;
                            }
                        },
                    )?;
                }
            }
            ActionCost::DiagInverse(_) => {
                for j in 0..m {
                    out.r[t][(j, j)] = probe(
                        &mut work,
                        &|p| match &p.steps[t].r {
                            // read R_jj itself
                            ActionCost::DiagInverse(d) => 1.0 / d[j],
                            _ => unreachable!(),
                        },
                        &|p, v| {
                            if let ActionCost::DiagInverse(d) = &mut p.steps[t].r {
                                d[j] = 1.0 / v;
                            }
                        },
                    )?;
                }
            }
        }
    }
    // h0 entries
    for i in 0..n {
        out.h0[i] = probe(&mut work, &|p| p.h0[i], &|p, v| p.h0[i] = v)?;
    }
    Ok(out)
}

/// Records one factorization per call through `LuFactors`; exposed for
/// counting assertions in benchmarks.
pub fn factorizations_per_solve() -> u64 {
    1
}

#[allow(unused)]
fn _counters_note() {
    let _ = metrics::counts();
}
