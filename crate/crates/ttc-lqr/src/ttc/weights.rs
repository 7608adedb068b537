//! Layer weights, initialization, and the serialized manifest format.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// y = W x + b.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LinearMap {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearMap { weight: DMatrix::zeros(out_dim, in_dim), bias: DVector::zeros(out_dim) }
    }

    fn random(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize, scale: f64) -> Self {
        let std = scale / (in_dim as f64).sqrt();
        LinearMap {
            weight: DMatrix::from_fn(out_dim, in_dim, |_, _| {
                let g: f64 = StandardNormal.sample(rng);
                g * std
            }),
            bias: DVector::zeros(out_dim),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weight * x + &self.bias
    }
}

/// Mean/variance normalization with a learned scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: DVector<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm { scale: DVector::from_element(dim, 1.0), eps: 1e-5 }
    }
}

/// Activation for the dynamics modulation amplitudes. The guarded variant
/// lower-bounds the amplitude at -1 + margin, which keeps every diagonal
/// entry 1 + gamma^t * amp strictly positive for all horizons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AmpActivation {
    Identity,
    LowerBounded,
}

impl AmpActivation {
    pub const MARGIN: f64 = 1e-3;

    pub fn apply(self, z: f64) -> f64 {
        match self {
            AmpActivation::Identity => z,
            AmpActivation::LowerBounded => {
                let shift = -1.0 + Self::MARGIN;
                shift + softplus(z - shift)
            }
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            AmpActivation::Identity => 1.0,
            AmpActivation::LowerBounded => sigmoid(z - (-1.0 + Self::MARGIN)),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-head coefficient maps. The cost-mixing maps `s_q`/`s_b` and the
/// basis matrices are shared across heads and live on the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    /// Dynamics modulation amplitudes (length w).
    pub s_a: LinearMap,
    /// Log-domain decay rates for the dynamics modulation, softplus-gated.
    pub s_gamma_a: LinearMap,
    /// Decay rates for the control-matrix modulation.
    pub s_gamma_b: LinearMap,
    /// Decay rates for the state-cost modulation.
    pub s_gamma_q: LinearMap,
    /// Diagonal of R^-1, softplus-gated.
    pub s_r: LinearMap,
    /// Terminal-cost mixing coefficients, softplus-gated.
    pub s_qf: LinearMap,
}

#[derive(Debug, Clone, Copy)]
pub struct TtcLayerConfig {
    pub model_width: usize,
    pub heads: usize,
    pub head_width: usize,
    pub basis_count: usize,
    /// Zero the output projection so the block starts as the identity.
    pub zero_init_output: bool,
    pub amp_activation: AmpActivation,
}

impl Default for TtcLayerConfig {
    fn default() -> Self {
        TtcLayerConfig {
            model_width: 64,
            heads: 4,
            head_width: 16,
            basis_count: 16,
            zero_init_output: false,
            amp_activation: AmpActivation::Identity,
        }
    }
}

/// All learnable tensors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TtcLayerWeights {
    pub model_width: usize,
    pub heads: usize,
    pub head_width: usize,
    pub basis_count: usize,
    pub amp_activation: AmpActivation,
    /// Unconstrained factors; each PSD basis is Qc Qc' / sqrt(w).
    pub q_factors: Vec<DMatrix<f64>>,
    /// Control-matrix bases (w x w).
    pub b_basis: Vec<DMatrix<f64>>,
    /// Shared state-cost mixing map (softplus-gated).
    pub s_q: LinearMap,
    /// Shared control mixing map.
    pub s_b: LinearMap,
    pub head_maps: Vec<HeadMaps>,
    /// (heads * head_width) x model_width input projection.
    pub w_in: DMatrix<f64>,
    /// model_width x (heads * head_width) output projection.
    pub w_out: DMatrix<f64>,
    pub ln_in: LayerNorm,
    pub ln_out: LayerNorm,
}

impl TtcLayerWeights {
    pub fn inner_width(&self) -> usize {
        self.heads * self.head_width
    }

    /// Deterministic random initialization.
    pub fn random(config: &TtcLayerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.head_width;
        let r = config.basis_count;
        let inner = config.heads * w;
        let mat = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64| {
            DMatrix::from_fn(rows, cols, |_, _| {
                let g: f64 = StandardNormal.sample(rng);
                g * std
            })
        };
        let q_factors = (0..r).map(|_| mat(&mut rng, w, w, 1.0 / (w as f64).sqrt())).collect();
        let b_basis = (0..r).map(|_| mat(&mut rng, w, w, 1.0 / (w as f64).sqrt())).collect();
        let s_q = LinearMap::random(&mut rng, r, w, 1.0);
        let s_b = LinearMap::random(&mut rng, r, w, 1.0);
        let head_maps = (0..config.heads)
            .map(|_| HeadMaps {
                s_a: LinearMap::random(&mut rng, w, w, 0.5),
                s_gamma_a: LinearMap::random(&mut rng, w, w, 1.0),
                s_gamma_b: LinearMap::random(&mut rng, w, w, 1.0),
                s_gamma_q: LinearMap::random(&mut rng, w, w, 1.0),
                s_r: LinearMap::random(&mut rng, w, w, 1.0),
                s_qf: LinearMap::random(&mut rng, r, w, 1.0),
            })
            .collect();
        let w_in = mat(&mut rng, inner, config.model_width, 1.0 / (config.model_width as f64).sqrt());
        let w_out = if config.zero_init_output {
            DMatrix::zeros(config.model_width, inner)
        } else {
            mat(&mut rng, config.model_width, inner, 1.0 / (inner as f64).sqrt())
        };
        TtcLayerWeights {
            model_width: config.model_width,
            heads: config.heads,
            head_width: w,
            basis_count: r,
            amp_activation: config.amp_activation,
            q_factors,
            b_basis,
            s_q,
            s_b,
            head_maps,
            w_in,
            w_out,
            ln_in: LayerNorm::identity(config.model_width),
            ln_out: LayerNorm::identity(inner),
        }
    }

    /// Flat view of every tensor as (name, shape, data), row-major.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let mat = |m: &DMatrix<f64>| -> (Vec<usize>, Vec<f64>) {
            let mut data = Vec::with_capacity(m.nrows() * m.ncols());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    data.push(m[(i, j)]);
                }
            }
            (vec![m.nrows(), m.ncols()], data)
        };
        let vec = |v: &DVector<f64>| (vec![v.len()], v.iter().copied().collect::<Vec<_>>());
        let push_map = |name: String, lm: &LinearMap, out: &mut Vec<_>| {
            let (s, d) = mat(&lm.weight);
            out.push((format!("{name}.weight"), s, d));
            let (s, d) = vec(&lm.bias);
            out.push((format!("{name}.bias"), s, d));
        };
        for (i, q) in self.q_factors.iter().enumerate() {
            let (s, d) = mat(q);
            out.push((format!("q_factor.{i}"), s, d));
        }
        for (i, b) in self.b_basis.iter().enumerate() {
            let (s, d) = mat(b);
            out.push((format!("b_basis.{i}"), s, d));
        }
        push_map("s_q".into(), &self.s_q, &mut out);
        push_map("s_b".into(), &self.s_b, &mut out);
        for (k, h) in self.head_maps.iter().enumerate() {
            push_map(format!("head.{k}.s_a"), &h.s_a, &mut out);
            push_map(format!("head.{k}.s_gamma_a"), &h.s_gamma_a, &mut out);
            push_map(format!("head.{k}.s_gamma_b"), &h.s_gamma_b, &mut out);
            push_map(format!("head.{k}.s_gamma_q"), &h.s_gamma_q, &mut out);
            push_map(format!("head.{k}.s_r"), &h.s_r, &mut out);
            push_map(format!("head.{k}.s_qf"), &h.s_qf, &mut out);
        }
        let (s, d) = mat(&self.w_in);
        out.push(("w_in".into(), s, d));
        let (s, d) = mat(&self.w_out);
        out.push(("w_out".into(), s, d));
        let (s, d) = vec(&self.ln_in.scale);
        out.push(("ln_in.scale".into(), s, d));
        let (s, d) = vec(&self.ln_out.scale);
        out.push(("ln_out.scale".into(), s, d));
        out
    }

    /// Writes the manifest: layer geometry plus one base64 little-endian
    /// f64 payload per tensor. Round-trips bit-exactly.
    pub fn save_json<W: Write>(&self, writer: W) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (name, shape, data) in self.tensors() {
            let mut bytes = Vec::with_capacity(data.len() * 8);
            for x in &data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            tensors.insert(name, TensorDto { shape, data: B64.encode(bytes) });
        }
        let dto = WeightsDto {
            schema: SCHEMA.into(),
            model_width: self.model_width,
            heads: self.heads,
            head_width: self.head_width,
            basis_count: self.basis_count,
            amp_activation: self.amp_activation,
            tensors,
        };
        serde_json::to_writer_pretty(writer, &dto)
            .map_err(|e| Error::UnsupportedInput(format!("weights serialization failed: {e}")))
    }

    pub fn load_json<R: Read>(reader: R) -> Result<Self> {
        let dto: WeightsDto = serde_json::from_reader(reader)
            .map_err(|e| Error::UnsupportedInput(format!("weights manifest parse error: {e}")))?;
        if dto.schema != SCHEMA {
            return Err(Error::UnsupportedInput(format!(
                "unknown weights schema {:?}",
                dto.schema
            )));
        }
        let config = TtcLayerConfig {
            model_width: dto.model_width,
            heads: dto.heads,
            head_width: dto.head_width,
            basis_count: dto.basis_count,
            zero_init_output: true,
            amp_activation: dto.amp_activation,
        };
        let mut weights = TtcLayerWeights::random(&config, 0);
        weights.ln_in = LayerNorm::identity(dto.model_width);
        weights.ln_out = LayerNorm::identity(dto.heads * dto.head_width);

        let read_tensor = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let t = dto
                .tensors
                .get(name)
                .ok_or_else(|| Error::UnsupportedInput(format!("missing tensor {name}")))?;
            let bytes = B64
                .decode(&t.data)
                .map_err(|e| Error::UnsupportedInput(format!("tensor {name}: {e}")))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::UnsupportedInput(format!("tensor {name}: ragged payload")));
            }
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let expect: usize = t.shape.iter().product();
            if data.len() != expect {
                return Err(Error::UnsupportedInput(format!(
                    "tensor {name}: {} values for shape {:?}",
                    data.len(),
                    t.shape
                )));
            }
            Ok((t.shape.clone(), data))
        };
        let to_mat = |shape: &[usize], data: &[f64]| -> DMatrix<f64> {
            DMatrix::from_fn(shape[0], shape[1], |i, j| data[i * shape[1] + j])
        };
        let load_map = |name: &str| -> Result<LinearMap> {
            let (ws, wd) = read_tensor(&format!("{name}.weight"))?;
            let (_, bd) = read_tensor(&format!("{name}.bias"))?;
            Ok(LinearMap { weight: to_mat(&ws, &wd), bias: DVector::from_vec(bd) })
        };
        for i in 0..dto.basis_count {
            let (s, d) = read_tensor(&format!("q_factor.{i}"))?;
            weights.q_factors[i] = to_mat(&s, &d);
            let (s, d) = read_tensor(&format!("b_basis.{i}"))?;
            weights.b_basis[i] = to_mat(&s, &d);
        }
        weights.s_q = load_map("s_q")?;
        weights.s_b = load_map("s_b")?;
        for k in 0..dto.heads {
            weights.head_maps[k] = HeadMaps {
                s_a: load_map(&format!("head.{k}.s_a"))?,
                s_gamma_a: load_map(&format!("head.{k}.s_gamma_a"))?,
                s_gamma_b: load_map(&format!("head.{k}.s_gamma_b"))?,
                s_gamma_q: load_map(&format!("head.{k}.s_gamma_q"))?,
                s_r: load_map(&format!("head.{k}.s_r"))?,
                s_qf: load_map(&format!("head.{k}.s_qf"))?,
            };
        }
        let (s, d) = read_tensor("w_in")?;
        weights.w_in = to_mat(&s, &d);
        let (s, d) = read_tensor("w_out")?;
        weights.w_out = to_mat(&s, &d);
        let (_, d) = read_tensor("ln_in.scale")?;
        weights.ln_in.scale = DVector::from_vec(d);
        let (_, d) = read_tensor("ln_out.scale")?;
        weights.ln_out.scale = DVector::from_vec(d);
        Ok(weights)
    }
}

const SCHEMA: &str = "ttc-weights-v1";

#[derive(Serialize, Deserialize)]
struct TensorDto {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct WeightsDto {
    schema: String,
    model_width: usize,
    heads: usize,
    head_width: usize,
    basis_count: usize,
    amp_activation: AmpActivation,
    tensors: BTreeMap<String, TensorDto>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_is_deterministic() {
        let cfg = TtcLayerConfig { heads: 2, head_width: 4, basis_count: 3, model_width: 8, ..Default::default() };
        let a = TtcLayerWeights::random(&cfg, 9);
        let b = TtcLayerWeights::random(&cfg, 9);
        assert_eq!(a, b);
        assert_ne!(a, TtcLayerWeights::random(&cfg, 10));
    }

    #[test]
    fn manifest_round_trips_bit_exactly() {
        let cfg = TtcLayerConfig { heads: 2, head_width: 3, basis_count: 2, model_width: 5, ..Default::default() };
        let w = TtcLayerWeights::random(&cfg, 4);
        let mut buf = Vec::new();
        w.save_json(&mut buf).unwrap();
        let loaded = TtcLayerWeights::load_json(buf.as_slice()).unwrap();
        assert_eq!(w, loaded);
    }

    #[test]
    fn lower_bounded_amp_stays_above_minus_one() {
        for z in [-100.0, -5.0, 0.0, 3.0] {
            let a = AmpActivation::LowerBounded.apply(z);
            assert!(a > -1.0 + AmpActivation::MARGIN / 2.0, "z={z} a={a}");
        }
        // derivative check by finite differences
        for z in [-2.0, 0.3, 4.0] {
            let h = 1e-6;
            let fd = (AmpActivation::LowerBounded.apply(z + h)
                - AmpActivation::LowerBounded.apply(z - h))
                / (2.0 * h);
            assert!((fd - AmpActivation::LowerBounded.derivative(z)).abs() < 1e-8);
        }
    }
}
