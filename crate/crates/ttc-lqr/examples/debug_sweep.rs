use ttc_lqr::generate::{random_problem, ConditioningSpec};
use ttc_lqr::problem::{validate_problem, LqrParams, ToleranceSet};
use ttc_lqr::{riccati, symplectic};

fn run(spec: &ConditioningSpec, n: usize, t: usize, seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let p = random_problem(seed * 37 + n as u64, n, n, t, &spec.with_affine(seed % 2 == 0));
        let vp = validate_problem(p, &ToleranceSet::default()).unwrap();
        let a = match symplectic::solve(&vp) {
            Ok(a) => a,
            Err(_) => return f64::INFINITY,
        };
        let b = riccati::solve(&vp).unwrap();
        let mut rel: f64 = (a.cost - b.cost).abs() / b.cost.abs().max(1e-12);
        for k in 0..=t {
            rel = rel.max((&a.states[k] - &b.states[k]).amax() / b.states[k].amax().max(1e-9));
            rel = rel.max((&a.costates[k] - &b.costates[k]).amax() / b.costates[k].amax().max(1e-9));
        }
        worst = worst.max(rel);
    }
    worst
}

fn main() {
    for (q, bs) in [(0.1, 0.3), (0.2, 0.4), (0.3, 0.5), (0.5, 0.6)] {
        let mut spec = ConditioningSpec::stable();
        spec.spectral_radius = 1.0;
        spec.q_scale = q;
        spec.r_eig_floor = 1.0;
        spec.b_scale = bs;
        let mut worst = 0.0f64;
        for &(n, t) in &[(16usize, 64usize), (8, 64), (4, 64), (2, 64), (1, 64), (16, 8)] {
            worst = worst.max(run(&spec, n, t, 10));
        }
        println!("radius 1.0 q={q} bs={bs}: {worst:.3e}");
    }
    for radius in [0.98, 1.02] {
        let mut spec = ConditioningSpec::stable();
        spec.spectral_radius = radius;
        spec.q_scale = 0.2;
        spec.r_eig_floor = 1.0;
        spec.b_scale = 0.4;
        println!("radius {radius} n=16 T=64: {:.3e}", run(&spec, 16, 64, 10));
    }
}
