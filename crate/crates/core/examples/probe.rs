use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::time::Instant;

fn main() {
    let mut rng = StdRng::seed_from_u64(31);
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut fails = 0;
    let mut max_p: f64 = 0.0;
    let mut unstable_count = 0usize;
    for _trial in 0..100 {
        let n = rng.gen_range(2..=50);
        let m = 2 + n / 10;
        let mut a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        a /= (n as f64).sqrt();
        for i in 0..n {
            a[(i, i)] -= 0.4; // leave only a few unstable modes
        }
        let b = DMatrix::<f64>::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let qh = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q = &qh * qh.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1;
        let r = DMatrix::<f64>::identity(m, m);
        unstable_count += a.complex_eigenvalues().iter().filter(|e| e.re > 0.0).count();
        match spodc::riccati::solve_are(&a, &b, &q, &r) {
            Ok(p) => {
                let s = &b * b.transpose();
                let resid = (a.transpose() * &p + &p * &a - &p * &s * &p + &q).norm();
                worst = worst.max(resid / (1.0 + q.norm()));
                max_p = max_p.max(p.norm());
            }
            Err(e) => { fails += 1; println!("n={n} m={m} FAILED: {e}"); }
        }
    }
    println!("100 pairs in {:.2?}; fails={fails}; worst resid/(1+|Q|)={worst:.3e}; max |P|={max_p:.3e}; avg unstable modes {:.1}", t0.elapsed(), unstable_count as f64 / 100.0);
}
