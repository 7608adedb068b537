//! Residual block wiring: normalization, projections, heads.
//!
//! ```text
//!   c     = W_in LN(x_in)                    split into per-head slices
//!   P_k   = contextualize(head k, c_k, T)
//!   o     = concat_k first_action(P_k, c_k)
//!   x_out = x_in + W_out LN(o)
//! ```
//!
//! With W_out = 0 the block is exactly the identity, which is how it is
//! spliced into a pretrained stack. Heads run sequentially in head order;
//! the per-head subproblems are independent, so batch-level callers own the
//! parallelism.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{self, ForwardCache};
use crate::error::{Error, Result};
use crate::problem::Validated;

use super::context::{context_backward, ContextualizedProblem, HeadMapGrads};
use super::weights::{LayerNorm, LinearMap, TtcLayerWeights};

/// Saved activations of one normalization.
#[derive(Debug, Clone)]
pub struct LayerNormState {
    pub normalized: DVector<f64>,
    pub inv_std: f64,
}

fn layer_norm_forward(ln: &LayerNorm, x: &DVector<f64>) -> (DVector<f64>, LayerNormState) {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let centered = x.map(|v| v - mean);
    let var = centered.iter().map(|v| v * v).sum::<f64>() / n;
    let inv_std = 1.0 / (var + ln.eps).sqrt();
    let normalized = centered * inv_std;
    let y = normalized.component_mul(&ln.scale);
    (y, LayerNormState { normalized, inv_std })
}

fn layer_norm_backward(
    ln: &LayerNorm,
    state: &LayerNormState,
    g_y: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = state.normalized.len() as f64;
    let g_scale = g_y.component_mul(&state.normalized);
    let g_hat = g_y.component_mul(&ln.scale);
    let mean_g = g_hat.sum() / n;
    let mean_gx = g_hat.dot(&state.normalized) / n;
    let g_x = state
        .normalized
        .map(|x| -x * mean_gx)
        .zip_map(&g_hat, |a, g| a + g - mean_g)
        * state.inv_std;
    (g_x, g_scale)
}

struct HeadState {
    problem: Validated<ContextualizedProblem>,
    ctx: DVector<f64>,
    lqr_cache: ForwardCache,
}

/// Everything the backward pass needs, retained by the forward pass.
pub struct BlockCache {
    ln_in_state: LayerNormState,
    ln_out_state: LayerNormState,
    heads: Vec<HeadState>,
    horizon: usize,
}

impl BlockCache {
    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Runs the block on one token feature.
pub fn block_forward(
    weights: &TtcLayerWeights,
    x_in: &DVector<f64>,
    horizon: usize,
) -> Result<(DVector<f64>, BlockCache)> {
    if x_in.len() != weights.model_width {
        return Err(Error::DimensionMismatch(format!(
            "input has length {}, expected model width {}",
            x_in.len(),
            weights.model_width
        )));
    }
    let (ln_x, ln_in_state) = layer_norm_forward(&weights.ln_in, x_in);
    let ctx_full = &weights.w_in * &ln_x;

    let w = weights.head_width;
    let mut o = DVector::zeros(weights.inner_width());
    let mut heads = Vec::with_capacity(weights.heads);
    for k in 0..weights.heads {
        let ctx = ctx_full.rows(k * w, w).into_owned();
        let problem = weights
            .contextualize(k, &ctx, horizon)
            .map_err(|e| attach_head(e, k))?;
        let (u1, lqr_cache) =
            autodiff::forward(&problem, &ctx).map_err(|e| attach_head(e, k))?;
        o.rows_mut(k * w, w).copy_from(&u1);
        heads.push(HeadState { problem, ctx, lqr_cache });
    }

    let (ln_o, ln_out_state) = layer_norm_forward(&weights.ln_out, &o);
    let x_out = x_in + &weights.w_out * &ln_o;
    Ok((x_out, BlockCache { ln_in_state, ln_out_state, heads, horizon }))
}

fn attach_head(e: Error, head: usize) -> Error {
    match e {
        Error::UnsupportedInput(msg) => Error::UnsupportedInput(format!("head {head}: {msg}")),
        other => other,
    }
}

/// Gradients for every tensor of [`TtcLayerWeights`], same shapes.
#[derive(Debug, Clone)]
pub struct TtcLayerGradients {
    pub q_factors: Vec<DMatrix<f64>>,
    pub b_basis: Vec<DMatrix<f64>>,
    pub s_q: LinearMap,
    pub s_b: LinearMap,
    pub head_maps: Vec<HeadMapGrads>,
    pub w_in: DMatrix<f64>,
    pub w_out: DMatrix<f64>,
    pub ln_in_scale: DVector<f64>,
    pub ln_out_scale: DVector<f64>,
}

/// Backward through the whole block. Returns weight gradients and the
/// gradient w.r.t. the block input.
pub fn block_backward(
    weights: &TtcLayerWeights,
    cache: &BlockCache,
    grad_x_out: &DVector<f64>,
) -> Result<(TtcLayerGradients, DVector<f64>)> {
    let w = weights.head_width;
    let r = weights.basis_count;

    // Output side: x_out = x_in + W_out LN(o).
    let ln_o = cache
        .ln_out_state
        .normalized
        .component_mul(&weights.ln_out.scale);
    let g_w_out = grad_x_out * ln_o.transpose();
    let g_ln_o = weights.w_out.transpose() * grad_x_out;
    let (g_o, g_ln_out_scale) = layer_norm_backward(&weights.ln_out, &cache.ln_out_state, &g_ln_o);

    // Heads, accumulated in head order.
    let mut g_ctx_full = DVector::zeros(weights.inner_width());
    let mut g_q_factors = vec![DMatrix::zeros(w, w); r];
    let mut g_b_basis = vec![DMatrix::zeros(w, w); r];
    let mut g_s_q = LinearMap::zeros(r, w);
    let mut g_s_b = LinearMap::zeros(r, w);
    let mut g_head_maps = Vec::with_capacity(weights.heads);
    for (k, head) in cache.heads.iter().enumerate() {
        let g_u1 = g_o.rows(k * w, w).into_owned();
        let lqr_grads = autodiff::backward(&head.problem, &head.lqr_cache, &g_u1)?;
        let back = context_backward(weights, k, head.problem.params(), &lqr_grads);
        for i in 0..r {
            g_q_factors[i] += &back.q_factor_grads[i];
            g_b_basis[i] += &back.b_basis_grads[i];
        }
        g_s_q.weight += &back.z_coeff_q_grad * head.ctx.transpose();
        g_s_q.bias += &back.z_coeff_q_grad;
        g_s_b.weight += &back.z_coeff_b_grad * head.ctx.transpose();
        g_s_b.bias += &back.z_coeff_b_grad;
        g_head_maps.push(back.head);
        g_ctx_full.rows_mut(k * w, w).copy_from(&back.ctx_grad);
    }

    // Input side: c = W_in LN(x_in), plus the residual passthrough.
    let ln_x = cache
        .ln_in_state
        .normalized
        .component_mul(&weights.ln_in.scale);
    let g_w_in = &g_ctx_full * ln_x.transpose();
    let g_ln_x = weights.w_in.transpose() * &g_ctx_full;
    let (g_x_ln, g_ln_in_scale) = layer_norm_backward(&weights.ln_in, &cache.ln_in_state, &g_ln_x);
    let g_x_in = grad_x_out + g_x_ln;

    Ok((
        TtcLayerGradients {
            q_factors: g_q_factors,
            b_basis: g_b_basis,
            s_q: g_s_q,
            s_b: g_s_b,
            head_maps: g_head_maps,
            w_in: g_w_in,
            w_out: g_w_out,
            ln_in_scale: g_ln_in_scale,
            ln_out_scale: g_ln_out_scale,
        },
        g_x_in,
    ))
}
