//! Synthesis of a control problem from a context state, and the gradient
//! chain back through that synthesis.
//!
//! Given a per-head context c, the layer produces time-modulation rates in
//! the log domain, gamma = exp(-softplus(s_gamma(c))) in (0, 1), and builds
//!
//! ```text
//!   A_t = I + diag(gamma_A^t) diag(s_A(c))          (diagonal storage)
//!   B_t = (sum_i s_B(c)_i B_i) diag(gamma_B^t)
//!   Q_t = diag(gamma_Q^t) (sum_i softplus(s_Q(c))_i Q_i) diag(gamma_Q^t)
//!   Q_T = sum_i softplus(s_Qf(c))_i Q_i             (terminal override)
//!   R   = stored directly as diag(R^-1) = softplus(s_R(c)).
//! ```
//!
//! Every Q_i = Qc_i Qc_i' / sqrt(w) is PSD, and the softplus gates keep all
//! mixing coefficients positive, so every synthesized problem satisfies the
//! solver invariants apart from A invertibility, which is checked entry-wise
//! for the requested horizon and reported, not clamped.
//!
//! Powers gamma^t are always evaluated as exp(-t * rate); nothing is
//! iterated multiplicatively, so any horizon is as stable as the first.
//! Steps are synthesized on demand; no per-step tensor is ever stored.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::{LqrParams, StepParams, Validated};
use crate::structured::{ActionCost, Structured};

use super::weights::{sigmoid, softplus, LinearMap, TtcLayerWeights};

/// Forward activations of one head's contextualization, kept for backward.
#[derive(Debug, Clone)]
pub struct ContextBundle {
    pub ctx: DVector<f64>,
    // pre-activations
    pub z_amp: DVector<f64>,
    pub z_rate_a: DVector<f64>,
    pub z_rate_b: DVector<f64>,
    pub z_rate_q: DVector<f64>,
    pub z_rho: DVector<f64>,
    pub z_coeff_q: DVector<f64>,
    pub z_coeff_qf: DVector<f64>,
    pub z_coeff_b: DVector<f64>,
    // activated values
    pub amp: DVector<f64>,
    pub rate_a: DVector<f64>,
    pub rate_b: DVector<f64>,
    pub rate_q: DVector<f64>,
    pub rho: DVector<f64>,
    pub coeff_q: DVector<f64>,
    pub coeff_qf: DVector<f64>,
    pub coeff_b: DVector<f64>,
    // mixed tensors
    pub psd_bases: Vec<DMatrix<f64>>,
    pub b_mix: DMatrix<f64>,
    pub q_mix: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
}

/// A synthesized problem; implements [`LqrParams`] with on-demand steps.
#[derive(Debug, Clone)]
pub struct ContextualizedProblem {
    pub bundle: ContextBundle,
    horizon: usize,
    width: usize,
}

impl TtcLayerWeights {
    /// Runs one head's contextualization for the given context and horizon.
    /// Fails with `SingularContextA` if any synthesized diagonal entry of
    /// A_t falls under the invertibility floor within the horizon.
    pub fn contextualize(
        &self,
        head: usize,
        ctx: &DVector<f64>,
        horizon: usize,
    ) -> Result<Validated<ContextualizedProblem>> {
        if horizon == 0 {
            return Err(Error::DimensionMismatch("horizon must be positive".into()));
        }
        if ctx.len() != self.head_width {
            return Err(Error::DimensionMismatch(format!(
                "context has length {}, expected head width {}",
                ctx.len(),
                self.head_width
            )));
        }
        let maps = &self.head_maps[head];
        let w = self.head_width;

        let z_amp = maps.s_a.apply(ctx);
        let z_rate_a = maps.s_gamma_a.apply(ctx);
        let z_rate_b = maps.s_gamma_b.apply(ctx);
        let z_rate_q = maps.s_gamma_q.apply(ctx);
        let z_rho = maps.s_r.apply(ctx);
        let z_coeff_q = self.s_q.apply(ctx);
        let z_coeff_qf = maps.s_qf.apply(ctx);
        let z_coeff_b = self.s_b.apply(ctx);

        let amp = z_amp.map(|z| self.amp_activation.apply(z));
        let rate_a = z_rate_a.map(softplus);
        let rate_b = z_rate_b.map(softplus);
        let rate_q = z_rate_q.map(softplus);
        let rho = z_rho.map(softplus);
        let coeff_q = z_coeff_q.map(softplus);
        let coeff_qf = z_coeff_qf.map(softplus);
        let coeff_b = z_coeff_b.clone();

        let scale = 1.0 / (w as f64).sqrt();
        let psd_bases: Vec<DMatrix<f64>> = self
            .q_factors
            .iter()
            .map(|qc| qc * qc.transpose() * scale)
            .collect();
        let mut b_mix = DMatrix::zeros(w, w);
        for (c, basis) in coeff_b.iter().zip(&self.b_basis) {
            b_mix += basis * *c;
        }
        let mut q_mix = DMatrix::zeros(w, w);
        for (c, basis) in coeff_q.iter().zip(&psd_bases) {
            q_mix += basis * *c;
        }
        let mut q_terminal = DMatrix::zeros(w, w);
        for (c, basis) in coeff_qf.iter().zip(&psd_bases) {
            q_terminal += basis * *c;
        }

        let bundle = ContextBundle {
            ctx: ctx.clone(),
            z_amp,
            z_rate_a,
            z_rate_b,
            z_rate_q,
            z_rho,
            z_coeff_q,
            z_coeff_qf,
            z_coeff_b,
            amp,
            rate_a,
            rate_b,
            rate_q,
            rho,
            coeff_q,
            coeff_qf,
            coeff_b,
            psd_bases,
            b_mix,
            q_mix,
            q_terminal,
        };
        let problem = ContextualizedProblem { bundle, horizon, width: w };
        problem.check_invertibility()?;
        Ok(Validated::new_unchecked(problem))
    }
}

impl ContextualizedProblem {
    /// Diagonal of A_t.
    pub fn a_diag(&self, t: usize) -> DVector<f64> {
        let b = &self.bundle;
        DVector::from_fn(self.width, |j, _| {
            1.0 + (-(t as f64) * b.rate_a[j]).exp() * b.amp[j]
        })
    }

    fn check_invertibility(&self) -> Result<()> {
        for t in 1..=self.horizon {
            let diag = self.a_diag(t);
            let hi = diag.amax();
            let floor = 1e-10 * hi.max(1.0);
            for (j, v) in diag.iter().enumerate() {
                if v.abs() < floor {
                    return Err(Error::SingularContextA { t, entry: j, value: *v });
                }
            }
        }
        Ok(())
    }
}

impl LqrParams for ContextualizedProblem {
    fn state_dim(&self) -> usize {
        self.width
    }
    fn control_dim(&self) -> usize {
        self.width
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn initial_state(&self) -> DVector<f64> {
        self.bundle.ctx.clone()
    }
    fn step(&self, t: usize) -> StepParams {
        let b = &self.bundle;
        let tf = t as f64;
        let a = Structured::Diag(self.a_diag(t));
        let mut b_t = b.b_mix.clone();
        for j in 0..self.width {
            let s = (-tf * b.rate_b[j]).exp();
            b_t.column_mut(j).scale_mut(s);
        }
        let q = if t == self.horizon {
            b.q_terminal.clone()
        } else {
            let v = DVector::from_fn(self.width, |j, _| (-tf * b.rate_q[j]).exp());
            DMatrix::from_fn(self.width, self.width, |i, j| v[i] * b.q_mix[(i, j)] * v[j])
        };
        StepParams {
            a,
            b: b_t,
            q,
            r: ActionCost::DiagInverse(b.rho.clone()),
            affine: None,
        }
    }
    fn has_affine(&self) -> bool {
        false
    }
}

/// Gradients w.r.t. one head's maps, mirroring [`super::HeadMaps`].
#[derive(Debug, Clone)]
pub struct HeadMapGrads {
    pub s_a: LinearMap,
    pub s_gamma_a: LinearMap,
    pub s_gamma_b: LinearMap,
    pub s_gamma_q: LinearMap,
    pub s_r: LinearMap,
    pub s_qf: LinearMap,
}

/// Output of the per-head backward chain.
pub struct ContextBackward {
    pub head: HeadMapGrads,
    /// Gradients w.r.t. the shared mixing maps, as pre-activation vectors
    /// contracted with this head's context later.
    pub z_coeff_q_grad: DVector<f64>,
    pub z_coeff_b_grad: DVector<f64>,
    /// Gradients w.r.t. the shared bases.
    pub q_factor_grads: Vec<DMatrix<f64>>,
    pub b_basis_grads: Vec<DMatrix<f64>>,
    /// Gradient w.r.t. the context vector (includes the initial-state term).
    pub ctx_grad: DVector<f64>,
}

/// Chains per-step parameter gradients back to weights and context.
///
/// `lqr_grads` holds matrix-space gradients from the solver backward pass;
/// the diagonal A and reciprocal R parameterizations and the log-domain
/// modulation rates are folded in here. The power-series terms contribute
/// d(gamma^t)/d(rate) = -t gamma^t, and the PSD factor chain is
/// gQc = (gQ + gQ') Qc / sqrt(w).
pub fn context_backward(
    weights: &TtcLayerWeights,
    head: usize,
    problem: &ContextualizedProblem,
    lqr_grads: &crate::autodiff::LqrGradients,
) -> ContextBackward {
    let b = &problem.bundle;
    let w = problem.width;
    let r = weights.basis_count;
    let horizon = problem.horizon;

    let mut g_amp = DVector::<f64>::zeros(w);
    let mut g_rate_a = DVector::<f64>::zeros(w);
    let mut g_bmix = DMatrix::<f64>::zeros(w, w);
    let mut g_rate_b = DVector::<f64>::zeros(w);
    let mut g_qmix = DMatrix::<f64>::zeros(w, w);
    let mut g_rate_q = DVector::<f64>::zeros(w);
    let mut g_qterm = DMatrix::<f64>::zeros(w, w);
    let mut g_rho = DVector::<f64>::zeros(w);

    for t in 1..=horizon {
        let tf = t as f64;
        let ga = &lqr_grads.a[t - 1];
        for j in 0..w {
            let gamma_t = (-tf * b.rate_a[j]).exp();
            g_amp[j] += ga[(j, j)] * gamma_t;
            g_rate_a[j] += ga[(j, j)] * b.amp[j] * (-tf) * gamma_t;
        }
        let gb = &lqr_grads.b[t - 1];
        for j in 0..w {
            let s = (-tf * b.rate_b[j]).exp();
            let mut dot = 0.0;
            for i in 0..w {
                g_bmix[(i, j)] += gb[(i, j)] * s;
                dot += gb[(i, j)] * b.b_mix[(i, j)];
            }
            g_rate_b[j] += dot * (-tf) * s;
        }
        let gq = &lqr_grads.q[t - 1];
        if t == horizon {
            g_qterm += gq;
        } else {
            let v = DVector::from_fn(w, |j, _| (-tf * b.rate_q[j]).exp());
            for i in 0..w {
                for j in 0..w {
                    g_qmix[(i, j)] += v[i] * gq[(i, j)] * v[j];
                }
            }
            for k in 0..w {
                let mut acc = 0.0;
                for j in 0..w {
                    acc += gq[(k, j)] * b.q_mix[(k, j)] * v[j];
                }
                g_rate_q[k] += 2.0 * acc * (-tf) * v[k];
            }
        }
        let gr = &lqr_grads.r[t - 1];
        for j in 0..w {
            g_rho[j] += -gr[(j, j)] / (b.rho[j] * b.rho[j]);
        }
    }

    // Mixing coefficients and basis gradients.
    let mut g_coeff_b = DVector::<f64>::zeros(r);
    let mut g_coeff_q = DVector::<f64>::zeros(r);
    let mut g_coeff_qf = DVector::<f64>::zeros(r);
    let mut b_basis_grads = Vec::with_capacity(r);
    let mut q_factor_grads = Vec::with_capacity(r);
    let scale = 1.0 / (w as f64).sqrt();
    for i in 0..r {
        g_coeff_b[i] = weights.b_basis[i].dot(&g_bmix);
        g_coeff_q[i] = b.psd_bases[i].dot(&g_qmix);
        g_coeff_qf[i] = b.psd_bases[i].dot(&g_qterm);
        b_basis_grads.push(&g_bmix * b.coeff_b[i]);
        let g_psd = &g_qmix * b.coeff_q[i] + &g_qterm * b.coeff_qf[i];
        q_factor_grads.push((&g_psd + g_psd.transpose()) * &weights.q_factors[i] * scale);
    }

    // Activation chains back to pre-activations.
    let g_z_amp = DVector::from_fn(w, |j, _| {
        g_amp[j] * weights.amp_activation.derivative(b.z_amp[j])
    });
    let g_z_rate_a = DVector::from_fn(w, |j, _| g_rate_a[j] * sigmoid(b.z_rate_a[j]));
    let g_z_rate_b = DVector::from_fn(w, |j, _| g_rate_b[j] * sigmoid(b.z_rate_b[j]));
    let g_z_rate_q = DVector::from_fn(w, |j, _| g_rate_q[j] * sigmoid(b.z_rate_q[j]));
    let g_z_rho = DVector::from_fn(w, |j, _| g_rho[j] * sigmoid(b.z_rho[j]));
    let g_z_coeff_q = DVector::from_fn(r, |i, _| g_coeff_q[i] * sigmoid(b.z_coeff_q[i]));
    let g_z_coeff_qf = DVector::from_fn(r, |i, _| g_coeff_qf[i] * sigmoid(b.z_coeff_qf[i]));
    let g_z_coeff_b = g_coeff_b;

    // Linear-map gradients; every map also routes gradient into the context.
    let maps = &weights.head_maps[head];
    let mut ctx_grad = lqr_grads.h0.clone();
    let map_grad = |map: &LinearMap, g_z: &DVector<f64>, ctx_grad: &mut DVector<f64>| {
        *ctx_grad += map.weight.transpose() * g_z;
        LinearMap { weight: g_z * b.ctx.transpose(), bias: g_z.clone() }
    };
    let head_grads = HeadMapGrads {
        s_a: map_grad(&maps.s_a, &g_z_amp, &mut ctx_grad),
        s_gamma_a: map_grad(&maps.s_gamma_a, &g_z_rate_a, &mut ctx_grad),
        s_gamma_b: map_grad(&maps.s_gamma_b, &g_z_rate_b, &mut ctx_grad),
        s_gamma_q: map_grad(&maps.s_gamma_q, &g_z_rate_q, &mut ctx_grad),
        s_r: map_grad(&maps.s_r, &g_z_rho, &mut ctx_grad),
        s_qf: map_grad(&maps.s_qf, &g_z_coeff_qf, &mut ctx_grad),
    };
    ctx_grad += weights.s_q.weight.transpose() * &g_z_coeff_q;
    ctx_grad += weights.s_b.weight.transpose() * &g_z_coeff_b;

    ContextBackward {
        head: head_grads,
        z_coeff_q_grad: g_z_coeff_q,
        z_coeff_b_grad: g_z_coeff_b,
        q_factor_grads,
        b_basis_grads,
        ctx_grad,
    }
}
