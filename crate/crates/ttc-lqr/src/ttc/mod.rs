//! Context-conditioned decision layer.
//!
//! The layer projects a token feature into per-head context states, lets
//! each context synthesize its own time-heterogeneous control problem
//! (diagonal dynamics, mixed PSD cost bases, reciprocal action costs),
//! solves it, and feeds the optimal first-step decision back into the
//! residual stream. Horizons are sampled from a truncated Poisson
//! log-normal during training and can be changed freely afterwards; the
//! time dependence lives in modulation coefficients, not in per-step
//! weights.

mod context;
mod layer;
mod sampler;
mod weights;

pub use context::{ContextBundle, ContextualizedProblem};
pub use layer::{
    block_forward, block_backward, BlockCache, LayerNormState, TtcLayerGradients,
};
pub use sampler::HorizonSampler;
pub use weights::{AmpActivation, HeadMaps, LayerNorm, LinearMap, TtcLayerConfig, TtcLayerWeights};
