//! Seeded random problem generation.
//!
//! Generation is deterministic: one counter-based ChaCha stream per call,
//! seeded explicitly, with a fixed draw order (h0, then per step A, B, Q, R,
//! r). Two calls with the same arguments produce identical problems. Every
//! generated problem passes validation by construction.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::problem::{LqrProblem, StepParams};
use crate::structured::{ActionCost, Structured};

/// Storage structure requested for generated A matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AStructure {
    #[default]
    Dense,
    Diag,
}

/// Storage structure requested for generated R matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RStructure {
    #[default]
    Dense,
    Diag,
    DiagInverse,
}

/// Knobs controlling the conditioning of generated problems.
///
/// `spectral_radius` sets max |eig(A_t)| exactly; values above 1 make the
/// cumulative symplectic products grow, which is the stress regime for
/// row normalization. The default scales keep the per-step expansion of the
/// symplectic factors gentle: products of random symplectic steps spread
/// their Lyapunov spectrum, and a wide spread makes the boundary matrix of
/// any shooting-style solver ill-conditioned long before anything
/// overflows. The boundary solve stays accurate to ~1e-8 out to T = 64 at
/// these defaults.
///
/// `decoupled` generates diagonal-valued B and Q (requires n = m), so the
/// problem separates into independent scalar systems. That is the overflow
/// stress family: entries still grow without bound when the dynamics expand,
/// but the boundary matrix stays perfectly conditioned after row rescaling,
/// isolating the overflow mechanism from the conditioning one.
#[derive(Debug, Clone, Copy)]
pub struct ConditioningSpec {
    pub a_structure: AStructure,
    pub r_structure: RStructure,
    pub spectral_radius: f64,
    /// Lower bound on eigenvalues of generated R.
    pub r_eig_floor: f64,
    /// Scale applied to the M M' / sqrt(n) construction of Q.
    pub q_scale: f64,
    /// Scale of generated B entries.
    pub b_scale: f64,
    /// Generate a nonzero affine action cost r_t.
    pub with_affine: bool,
    /// Diagonal-valued B and Q: independent scalar subsystems.
    pub decoupled: bool,
}

impl Default for ConditioningSpec {
    fn default() -> Self {
        ConditioningSpec {
            a_structure: AStructure::Dense,
            r_structure: RStructure::Dense,
            spectral_radius: 1.0,
            r_eig_floor: 1.0,
            q_scale: 0.1,
            b_scale: 0.3,
            with_affine: false,
            decoupled: false,
        }
    }
}

impl ConditioningSpec {
    /// Norm-one dynamics with gentle coupling; the product of step factors
    /// grows slowly, so solver cross-checks hold tight tolerances out to
    /// T = 64 in f64.
    pub fn stable() -> Self {
        ConditioningSpec::default()
    }

    /// Expanding dynamics with the given spectral radius (> 1), decoupled so
    /// cumulative symplectic products overflow without row normalization at
    /// long horizons while the rescaled boundary solve stays accurate.
    pub fn unstable(radius: f64) -> Self {
        ConditioningSpec {
            spectral_radius: radius,
            a_structure: AStructure::Diag,
            r_structure: RStructure::Diag,
            decoupled: true,
            ..ConditioningSpec::default()
        }
    }

    /// Diagonal A and R, the structured family with O(1) dense inversions.
    pub fn diagonal() -> Self {
        ConditioningSpec {
            a_structure: AStructure::Diag,
            r_structure: RStructure::Diag,
            ..ConditioningSpec::default()
        }
    }

    pub fn with_affine(mut self, yes: bool) -> Self {
        self.with_affine = yes;
        self
    }

    fn clamped(mut self) -> Self {
        self.spectral_radius = self.spectral_radius.clamp(0.05, 4.0);
        self.r_eig_floor = self.r_eig_floor.clamp(1e-6, 1e6);
        self.q_scale = self.q_scale.clamp(0.0, 1e6);
        self.b_scale = self.b_scale.clamp(1e-3, 1e3);
        self
    }
}

fn gauss_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random matrix with orthonormal columns (rows if cols > rows), so its Gram
/// matrix is a scaled projection. Keeps the control coupling isotropic, which
/// keeps the expansion-rate spread of the symplectic products small.
fn orthonormal_factor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    if cols <= rows {
        let g = gauss_mat(rng, rows, cols);
        let qr = g.qr();
        qr.q()
    } else {
        let g = gauss_mat(rng, cols, rows);
        let qr = g.qr();
        qr.q().transpose()
    }
}

fn gauss_vec(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().fold(0.0f64, |acc, z| acc.max(z.norm()))
}

/// Dense A near the identity, rescaled to the exact target spectral radius,
/// with a retry loop guarding against accidental near-singularity.
fn gen_dense_a(rng: &mut ChaCha8Rng, n: usize, target: f64) -> DMatrix<f64> {
    let mut bump = 0.0;
    loop {
        let noise = gauss_mat(rng, n, n) * (0.15 / (n as f64).sqrt());
        let mut a = DMatrix::identity(n, n) + noise;
        for i in 0..n {
            a[(i, i)] += bump;
        }
        let rho = spectral_radius(&a);
        if rho > 0.0 {
            a *= target / rho;
            let sv = a.singular_values();
            if sv.min() >= 1e-8 * sv.max() {
                return a;
            }
        }
        bump += 0.05;
    }
}

/// Diagonal A with magnitudes in a narrow band below the target radius, then
/// rescaled so the largest hits it exactly. The narrow band keeps per
/// coordinate growth rates close together; a wide band would make the
/// boundary matrix of the reverse sweep exponentially ill-conditioned in T.
fn gen_diag_a(rng: &mut ChaCha8Rng, n: usize, target: f64) -> DVector<f64> {
    let mut d = DVector::from_fn(n, |_, _| {
        let mag: f64 = rng.random_range(0.9..1.0);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        mag * sign
    });
    let hi = d.amax();
    d *= target / hi;
    d
}

/// Generates a valid problem deterministically from the seed.
pub fn random_problem(
    seed: u64,
    n: usize,
    m: usize,
    horizon: usize,
    spec: &ConditioningSpec,
) -> LqrProblem {
    let spec = spec.clamped();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h0 = gauss_vec(&mut rng, n);
    let mut steps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = match spec.a_structure {
            AStructure::Dense => Structured::Dense(gen_dense_a(&mut rng, n, spec.spectral_radius)),
            AStructure::Diag => Structured::Diag(gen_diag_a(&mut rng, n, spec.spectral_radius)),
        };
        let b = if spec.decoupled {
            assert_eq!(n, m, "decoupled generation requires square control");
            DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| {
                spec.b_scale * rng.random_range(0.5..1.5)
            }))
        } else {
            orthonormal_factor(&mut rng, n, m) * spec.b_scale
        };
        let q = if spec.decoupled {
            DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| {
                spec.q_scale * rng.random_range(0.2..1.2)
            }))
        } else {
            let g = gauss_mat(&mut rng, n, n) / (n as f64).sqrt();
            (&g * g.transpose()) * (spec.q_scale / (n as f64).sqrt())
        };
        let r = match spec.r_structure {
            RStructure::Dense => {
                let w = gauss_mat(&mut rng, m, m) / (m as f64).sqrt();
                let r = (&w * w.transpose()) * (0.2 * spec.r_eig_floor)
                    + DMatrix::identity(m, m) * spec.r_eig_floor;
                ActionCost::Dense(r)
            }
            RStructure::Diag => ActionCost::Diag(DVector::from_fn(m, |_, _| {
                spec.r_eig_floor * rng.random_range(1.0..1.5)
            })),
            RStructure::DiagInverse => ActionCost::DiagInverse(DVector::from_fn(m, |_, _| {
                1.0 / (spec.r_eig_floor * rng.random_range(1.0..1.5))
            })),
        };
        let affine = if spec.with_affine {
            Some(gauss_vec(&mut rng, m) * 0.5)
        } else {
            None
        };
        steps.push(StepParams { a, b, q, r, affine });
    }
    LqrProblem { state_dim: n, control_dim: m, horizon, h0, steps }
}
