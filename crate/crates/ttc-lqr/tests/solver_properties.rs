//! Cross-solver and structural properties on generated problems.

use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttc_lqr::generate::{random_problem, AStructure, ConditioningSpec, RStructure};
use ttc_lqr::problem::{
    evaluate_cost, rollout, validate_problem, LqrParams, LqrProblem, ToleranceSet, Validated,
};
use ttc_lqr::symplectic::{materialize_step, symplectic_residual, StepMatrix};
use ttc_lqr::{kkt, riccati, symplectic};

fn valid(p: LqrProblem) -> Validated<LqrProblem> {
    validate_problem(p, &ToleranceSet::default()).unwrap()
}

fn rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax()).max(1e-12)
}

#[test]
fn three_backends_agree_across_the_size_grid() {
    let mut cases = 0;
    for &n in &[1usize, 2, 4, 8] {
        for &t in &[1usize, 2, 8, 24] {
            for seed in 0..3u64 {
                let spec = ConditioningSpec::stable().with_affine(seed % 2 == 0);
                let p = random_problem(seed + 100 * n as u64, n, n, t, &spec);
                let vp = valid(p);
                let sy = symplectic::solve(&vp).unwrap();
                let ri = riccati::solve(&vp).unwrap();
                let kk = kkt::solve(&vp).unwrap();
                for (x, y) in [(&sy, &ri), (&sy, &kk), (&ri, &kk)] {
                    assert!(
                        (x.cost - y.cost).abs() / y.cost.abs().max(1e-9) < 1e-6,
                        "cost n={n} t={t} seed={seed}"
                    );
                    for k in 0..=t {
                        assert!(rel_vec(&x.states[k], &y.states[k]) < 1e-6);
                        assert!(rel_vec(&x.costates[k], &y.costates[k]) < 1e-6);
                    }
                    for k in 0..t {
                        assert!(rel_vec(&x.actions[k], &y.actions[k]) < 1e-6);
                    }
                }
                cases += 1;
            }
        }
    }
    assert_eq!(cases, 48);
}

#[test]
fn rectangular_control_dims_are_supported() {
    for (n, m) in [(4usize, 2usize), (2, 5), (6, 1)] {
        let p = random_problem(3, n, m, 6, &ConditioningSpec::stable().with_affine(true));
        let vp = valid(p);
        let sy = symplectic::solve(&vp).unwrap();
        let ri = riccati::solve(&vp).unwrap();
        let kk = kkt::solve(&vp).unwrap();
        assert!((sy.cost - ri.cost).abs() / ri.cost.abs().max(1e-9) < 1e-8);
        assert!((kk.cost - ri.cost).abs() / ri.cost.abs().max(1e-9) < 1e-8);
        assert!(sy.dynamics_residual(vp.params()) < 1e-8);
    }
}

#[test]
fn optimal_trajectories_resist_action_perturbations() {
    let p = random_problem(5, 6, 6, 16, &ConditioningSpec::stable());
    let vp = valid(p);
    let opt = symplectic::solve(&vp).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dim = 6 * 16;
    for _ in 0..200 {
        let mut delta: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        for d in &mut delta {
            *d *= 1e-3 / norm;
        }
        let actions: Vec<DVector<f64>> = opt
            .actions
            .iter()
            .enumerate()
            .map(|(t, u)| {
                DVector::from_fn(6, |i, _| u[i] + delta[t * 6 + i])
            })
            .collect();
        let states = rollout(vp.params(), &actions).unwrap();
        let cost = evaluate_cost(vp.params(), &states, &actions).unwrap();
        assert!(cost >= opt.cost - 1e-12, "perturbation reduced cost by {}", opt.cost - cost);
    }
}

#[test]
fn first_action_scales_linearly_with_initial_state() {
    // No affine terms: u_1(alpha h0) = alpha u_1(h0).
    let p = random_problem(8, 5, 5, 10, &ConditioningSpec::stable());
    let vp = valid(p.clone());
    let base = symplectic::solve(&vp).unwrap().actions[0].clone();
    for alpha in [2.0, -0.5, 10.0] {
        let mut scaled = p.clone();
        scaled.h0 *= alpha;
        let u = symplectic::solve(&valid(scaled)).unwrap().actions[0].clone();
        assert!(rel_vec(&u, &(&base * alpha)) < 1e-9, "alpha {alpha}");
    }
}

#[test]
fn diagonal_and_inverse_diagonal_storage_agree_with_dense() {
    // The same mathematical problem in three storages gives one solution.
    let p_diag = random_problem(6, 5, 5, 12, &ConditioningSpec::diagonal());
    let vp_diag = valid(p_diag.clone());

    let mut p_dense = p_diag.clone();
    for s in &mut p_dense.steps {
        s.a = ttc_lqr::structured::Structured::Dense(s.a.to_dense());
        s.r = ttc_lqr::structured::ActionCost::Dense(s.r.to_dense());
    }
    let vp_dense = valid(p_dense);

    let mut p_inv = p_diag.clone();
    for s in &mut p_inv.steps {
        if let ttc_lqr::structured::ActionCost::Diag(d) = &s.r {
            s.r = ttc_lqr::structured::ActionCost::DiagInverse(d.map(|x| 1.0 / x));
        }
    }
    let vp_inv = valid(p_inv);

    let a = symplectic::solve(&vp_diag).unwrap();
    let b = symplectic::solve(&vp_dense).unwrap();
    let c = symplectic::solve(&vp_inv).unwrap();
    assert!((a.cost - b.cost).abs() < 1e-10 * b.cost.abs().max(1.0));
    assert!((a.cost - c.cost).abs() < 1e-12 * c.cost.abs().max(1.0));
    for t in 0..12 {
        assert!(rel_vec(&a.actions[t], &b.actions[t]) < 1e-9);
        assert!(rel_vec(&a.actions[t], &c.actions[t]) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_matrices_are_symplectic(seed in 0u64..10_000, n in 1usize..6, t_pick in 1usize..6) {
        let horizon = 6;
        let spec = ConditioningSpec::stable().with_affine(seed % 3 == 0);
        let p = random_problem(seed, n, n, horizon, &spec);
        let vp = valid(p);
        let sigma = materialize_step(&vp, t_pick, StepMatrix::Reverse).unwrap();
        let s = materialize_step(&vp, t_pick, StepMatrix::Forward).unwrap();
        prop_assert!(symplectic_residual(&sigma) < 1e-10);
        prop_assert!(symplectic_residual(&s) < 1e-10);
    }

    #[test]
    fn solver_equivalence_random_structures(
        seed in 0u64..1_000,
        n in 1usize..6,
        horizon in 1usize..12,
        a_diag: bool,
        r_kind in 0u8..3,
        affine: bool,
    ) {
        let spec = ConditioningSpec {
            a_structure: if a_diag { AStructure::Diag } else { AStructure::Dense },
            r_structure: match r_kind {
                0 => RStructure::Dense,
                1 => RStructure::Diag,
                _ => RStructure::DiagInverse,
            },
            with_affine: affine,
            ..ConditioningSpec::stable()
        };
        let p = random_problem(seed, n, n, horizon, &spec);
        let vp = valid(p);
        let sy = symplectic::solve(&vp).unwrap();
        let ri = riccati::solve(&vp).unwrap();
        prop_assert!((sy.cost - ri.cost).abs() / ri.cost.abs().max(1e-9) < 1e-7);
        prop_assert!(rel_vec(&sy.costates[0], &ri.costates[0]) < 1e-7);
        prop_assert!(sy.dynamics_residual(vp.params()) < 1e-8);
        // boundary identities
        let qt = vp.step(horizon).q.clone();
        let lam_t = &qt * &sy.states[horizon];
        prop_assert!(rel_vec(&sy.costates[horizon], &lam_t) < 1e-7);
    }

    #[test]
    fn json_round_trip_is_exact(
        seed in 0u64..1_000,
        n in 1usize..5,
        horizon in 1usize..6,
        a_diag: bool,
        r_kind in 0u8..3,
        affine: bool,
    ) {
        let spec = ConditioningSpec {
            a_structure: if a_diag { AStructure::Diag } else { AStructure::Dense },
            r_structure: match r_kind {
                0 => RStructure::Dense,
                1 => RStructure::Diag,
                _ => RStructure::DiagInverse,
            },
            with_affine: affine,
            ..ConditioningSpec::stable()
        };
        let p = random_problem(seed, n, n, horizon, &spec);
        let text = ttc_lqr::json::problem_to_json(&p);
        let back = ttc_lqr::json::problem_from_json(&text).unwrap();
        prop_assert_eq!(p, back);
    }
}
