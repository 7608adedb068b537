//! Batched, differentiable finite-horizon linear-quadratic control.
//!
//! The crate solves problems of the form
//!
//! ```text
//!   minimize   sum_t 1/2 (h_t' Q_t h_t + u_t' R_t u_t) + r_t' u_t
//!   subject to h_t = A_t h_{t-1} + B_t u_t,    h_0 given,
//! ```
//!
//! three ways: a classical backward value recursion ([`riccati`]), a fast
//! path built on cumulative products of symplectic step matrices
//! ([`symplectic`]), and a dense stacked optimality system solved directly
//! ([`kkt`]) as a verification oracle. Analytic parameter gradients flow
//! through a second problem with the same dynamics ([`autodiff`]), and a
//! context-conditioned layer ([`ttc`]) synthesizes whole problems from
//! context states and differentiates through the synthesis.
//!
//! Every solver records its dense factorizations and sweep steps
//! ([`metrics`]), which is how the structural claims (one boundary
//! factorization per diagonal-structured solve, zero reverse sweeps in the
//! cached backward pass) are asserted rather than assumed.
//!
//! ```
//! use ttc_lqr::problem::{scalar_example, validate_problem, ToleranceSet};
//!
//! let vp = validate_problem(scalar_example(), &ToleranceSet::default()).unwrap();
//! let traj = ttc_lqr::symplectic::solve(&vp).unwrap();
//! assert!((traj.cost - 0.3).abs() < 1e-12);
//! assert!((traj.actions[0][0] + 0.6).abs() < 1e-12);
//! ```

pub mod autodiff;
pub mod error;
pub mod generate;
pub mod json;
pub mod kkt;
pub mod linalg;
pub mod metrics;
pub mod problem;
pub mod riccati;
pub mod structured;
pub mod symplectic;
pub mod ttc;

pub use error::{Error, Result};
