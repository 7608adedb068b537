use nalgebra::DMatrix;
use std::time::Instant;

fn main() {
    for size in [400usize, 1000, 2000, 3104] {
        let a = DMatrix::<f64>::from_fn(size, size, |i, j| {
            ((i * 31 + j * 17) % 97) as f64 / 97.0 + if i == j { 3.0 } else { 0.0 }
        });
        let b = nalgebra::DVector::<f64>::from_element(size, 1.0);
        let t0 = Instant::now();
        let lu = a.clone().lu();
        let _x = lu.solve(&b).unwrap();
        println!("LU {size}: {:?}", t0.elapsed());
    }
    let n = 16;
    let a = DMatrix::<f64>::from_fn(n, n, |i, j| ((i + j) % 7) as f64 * 0.1 + 0.3);
    let mut y = DMatrix::<f64>::identity(n, n);
    let t0 = Instant::now();
    let reps = 256 * 64 * 3;
    for _ in 0..reps {
        y = &y * &a;
        y /= y[(0, 0)].abs().max(1.0);
    }
    println!("16x16 matmul x{reps}: {:?} ({:.1} ns/mul)", t0.elapsed(), t0.elapsed().as_nanos() as f64 / reps as f64);
    let spd = &a * a.transpose() + DMatrix::<f64>::identity(n, n);
    let t0 = Instant::now();
    let reps2 = 256 * 64;
    for _ in 0..reps2 {
        let c = spd.clone().cholesky().unwrap();
        let _s = c.solve(&DMatrix::<f64>::identity(n, n));
    }
    println!("16x16 cholesky+solve x{reps2}: {:?}", t0.elapsed());
    std::hint::black_box(&y);
}
