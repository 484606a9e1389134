use mdr_deepc::qpcore::{ConvexProblem, QuadCost};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random feasible epigraph problem with `n_z <= 20` and up to five costs.
pub fn random_problem(seed: u64) -> ConvexProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=20);
    let j = rng.gen_range(1..=5);
    let mut p = ConvexProblem::new(n);
    let zf = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    for c in 0..j {
        // A full-rank first cost keeps the max bounded below.
        let rank = if c == 0 { n } else { rng.gen_range(1..=n) };
        let a = DMatrix::from_fn(n, rank, |_, _| rng.gen_range(-1.0..1.0));
        let pm = &a * a.transpose() / rank as f64;
        let q = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let cost = QuadCost::new((&pm + pm.transpose()) * 0.5, q, rng.gen_range(-1.0..1.0)).unwrap();
        p.add_cost(cost).unwrap();
    }
    if n > 1 && rng.gen_bool(0.4) {
        let k = rng.gen_range(1..n);
        let e = DMatrix::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0));
        let f = &e * &zf;
        p.add_equalities(&e, &f).unwrap();
    }
    if rng.gen_bool(0.5) {
        for i in 0..n {
            if rng.gen_bool(0.5) {
                p.bound(i, zf[i] - rng.gen_range(0.0..1.0), zf[i] + rng.gen_range(0.0..1.0)).unwrap();
            }
        }
    }
    if rng.gen_bool(0.4) {
        let k = rng.gen_range(1..=5);
        let g = DMatrix::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &g * &zf + DVector::from_fn(k, |_, _| rng.gen_range(0.0..0.5));
        p.add_inequalities(&g, &h).unwrap();
    }
    p
}
