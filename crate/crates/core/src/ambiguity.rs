//! Residual estimation, empirical distributions, 1-Wasserstein balls and
//! scenario generation.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::pinv;
use crate::plant::{sample_theta_from, HybridPartition, MsdParams, ThetaBox};
use crate::seeds::{derive_seed, indexed_seed};
use crate::trajkit::Signal;

/// Uniformly weighted atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDist {
    atoms: Vec<DVector<f64>>,
    dim: usize,
}

impl EmpiricalDist {
    pub fn new(atoms: Vec<DVector<f64>>) -> Result<Self> {
        let sig = Signal::new(atoms)?;
        Ok(Self::from_signal(sig))
    }

    pub fn from_signal(s: Signal) -> Self {
        let dim = s.dim();
        Self { atoms: s.samples().to_vec(), dim }
    }

    /// Single atom at the origin.
    pub fn dirac_zero(dim: usize) -> Self {
        Self { atoms: vec![DVector::zeros(dim)], dim }
    }

    pub fn atoms(&self) -> &[DVector<f64>] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.atoms.len() as f64
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for a in &self.atoms {
            m += a;
        }
        m / self.atoms.len() as f64
    }

    /// Per-channel sample standard deviation (denominator `S - 1`).
    pub fn std(&self) -> DVector<f64> {
        let m = self.mean();
        let s = self.atoms.len();
        if s < 2 {
            return DVector::zeros(self.dim);
        }
        let mut v = DVector::zeros(self.dim);
        for a in &self.atoms {
            v += (a - &m).map(|x| x * x);
        }
        (v / (s - 1) as f64).map(f64::sqrt)
    }

    fn channel(&self, c: usize) -> Vec<f64> {
        self.atoms.iter().map(|a| a[c]).collect()
    }

    pub fn to_signal(&self) -> Signal {
        Signal::new(self.atoms.clone()).expect("non-empty, consistent atoms")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.to_signal().write_csv(w)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        Ok(Self::from_signal(Signal::read_csv(r)?))
    }
}

/// Wasserstein ball of order 1 around an empirical center.
#[derive(Clone, Debug, PartialEq)]
pub struct AmbiguitySpec {
    pub center: EmpiricalDist,
    pub radius: f64,
}

impl AmbiguitySpec {
    pub fn new(center: EmpiricalDist, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::InvalidParameter(format!("ambiguity radius must be >= 0, got {radius}")));
        }
        Ok(Self { center, radius })
    }

    /// Wasserstein order; only `p = 1` is supported.
    pub fn order(&self) -> u32 {
        1
    }
}

/// One sampled parameter/noise realization.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub theta: MsdParams,
    /// Process noise on the known states, one sample per horizon step.
    pub w_path: Signal,
    /// Measurement noise on all outputs, one sample per horizon step.
    pub v_path: Signal,
}

impl Scenario {
    pub fn horizon(&self) -> usize {
        self.w_path.len()
    }
}

/// Process-noise residuals on the known block and measurement-noise residuals
/// on every output.
///
/// `x_known` must hold at least `len(u) + 1` samples; the residual at step `k` uses
/// `x_known[k + 1]`, so `min(len(u), len(x_known) - 1)` residuals are produced.
/// The unknown state needed for the output prediction is reconstructed from the
/// known-state transition by least squares.
pub fn estimate_residuals(
    part: &HybridPartition,
    u: &Signal,
    y: &Signal,
    x_known: &Signal,
) -> Result<(EmpiricalDist, EmpiricalDist)> {
    let m = part.b_k.ncols();
    let p = part.p_k + part.p_u;
    if u.dim() != m || y.dim() != p || x_known.dim() != part.n_k {
        return Err(Error::DimensionMismatch(format!(
            "residual inputs have dimensions u:{} y:{} x:{}, expected {m}, {p}, {}",
            u.dim(),
            y.dim(),
            x_known.dim(),
            part.n_k
        )));
    }
    if u.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("u has {} samples but y has {}", u.len(), y.len())));
    }
    let count = u.len().min(x_known.len().saturating_sub(1));
    if count < 1 {
        return Err(Error::DimensionMismatch("need at least two aligned samples".into()));
    }
    let a_y = part.coupling_matrix();
    let a_ku_pinv = pinv(&part.a_ku);
    let mut ws = Vec::with_capacity(count);
    let mut vs = Vec::with_capacity(count);
    for k in 0..count {
        let xk = x_known.get(k);
        let uk = u.get(k);
        let yk = y.get(k);
        let y_u = yk.rows(part.p_k, part.p_u).into_owned();
        let drift = x_known.get(k + 1) - &part.a_k * xk - &part.b_k * uk;
        ws.push(&drift - &a_y * &y_u);
        let x_u = &a_ku_pinv * &drift;
        let mut v = yk.clone();
        let yk_hat = &part.c_k * xk + &part.d_k * uk;
        let yu_hat = &part.c_uk * xk + &part.c_u * &x_u + &part.d_u * uk;
        for i in 0..part.p_k {
            v[i] -= yk_hat[i];
        }
        for i in 0..part.p_u {
            v[part.p_k + i] -= yu_hat[i];
        }
        vs.push(v);
    }
    Ok((EmpiricalDist::new(ws)?, EmpiricalDist::new(vs)?))
}

fn w1_scalar(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    // Integrate |F_a^{-1}(q) - F_b^{-1}(q)| over the merged quantile grid.
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut q = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let qa = (i + 1) as f64 / na as f64;
        let qb = (j + 1) as f64 / nb as f64;
        let next = qa.min(qb);
        total += (next - q) * (a[i] - b[j]).abs();
        q = next;
        // Advance every sequence whose step ends here (both on ties).
        let step_a = (i + 1) * nb <= (j + 1) * na;
        let step_b = (j + 1) * na <= (i + 1) * nb;
        i += step_a as usize;
        j += step_b as usize;
    }
    total
}

/// Sum over channels of the one-dimensional 1-Wasserstein distance.
pub fn w1_distance(p: &EmpiricalDist, q: &EmpiricalDist) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch(format!("distributions have dimensions {} and {}", p.dim(), q.dim())));
    }
    Ok((0..p.dim()).map(|c| w1_scalar(p.channel(c), q.channel(c))).sum())
}

/// Random member of the ball: every atom is shifted, with shifts scaled so that
/// the summed per-channel mean absolute shift equals `radius * U(0, 1]`. The
/// shift itself is a coupling, so the result lies inside the ball.
pub fn sample_dist_in_ball(spec: &AmbiguitySpec, rng_seed: u64) -> EmpiricalDist {
    if spec.radius == 0.0 {
        return spec.center.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let d = spec.center.dim();
    let s = spec.center.len();
    let shifts: Vec<DVector<f64>> =
        (0..s).map(|_| DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng))).collect();
    let budget: f64 = (0..d).map(|c| shifts.iter().map(|v: &DVector<f64>| v[c].abs()).sum::<f64>() / s as f64).sum();
    if budget == 0.0 {
        return spec.center.clone();
    }
    let fraction = 1.0 - rng.gen::<f64>();
    let scale = spec.radius * fraction / budget;
    let atoms = spec.center.atoms().iter().zip(&shifts).map(|(a, sh)| a + sh * scale).collect();
    EmpiricalDist { atoms, dim: d }
}

fn draw_path<R: Rng>(dist: &EmpiricalDist, n: usize, rng: &mut R) -> Signal {
    let samples = (0..n).map(|_| dist.atoms()[rng.gen_range(0..dist.len())].clone()).collect();
    Signal::new(samples).expect("horizon >= 1")
}

/// `M` scenarios around the nominal chain parameters.
pub fn draw_scenarios(
    bx: &ThetaBox,
    spec_w: &AmbiguitySpec,
    spec_v: &AmbiguitySpec,
    m: usize,
    n: usize,
    rng_seed: u64,
) -> Result<Vec<Scenario>> {
    draw_scenarios_from(&MsdParams::nominal(), bx, spec_w, spec_v, m, n, rng_seed)
}

/// `M` scenarios whose parameters differ from `base` only in `(k3, c3)`.
/// Scenario `i` depends only on `rng_seed + i`.
pub fn draw_scenarios_from(
    base: &MsdParams,
    bx: &ThetaBox,
    spec_w: &AmbiguitySpec,
    spec_v: &AmbiguitySpec,
    m: usize,
    n: usize,
    rng_seed: u64,
) -> Result<Vec<Scenario>> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidParameter(format!("scenario count and horizon must be >= 1 (got {m}, {n})")));
    }
    (0..m)
        .map(|i| {
            let seed = indexed_seed(rng_seed, i);
            let theta = sample_theta_from(base, bx, derive_seed(seed, "theta"))?;
            let pw = sample_dist_in_ball(spec_w, derive_seed(seed, "ball-w"));
            let pv = sample_dist_in_ball(spec_v, derive_seed(seed, "ball-v"));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "paths"));
            let w_path = draw_path(&pw, n, &mut rng);
            let v_path = draw_path(&pv, n, &mut rng);
            Ok(Scenario { theta, w_path, v_path })
        })
        .collect()
}

/// Appends samples and keeps the most recent `window` atoms.
pub fn update_dist(d: &EmpiricalDist, new_samples: &[DVector<f64>], window: usize) -> Result<EmpiricalDist> {
    if let Some(bad) = new_samples.iter().find(|s| s.len() != d.dim()) {
        return Err(Error::DimensionMismatch(format!(
            "sample has dimension {}, distribution has {}",
            bad.len(),
            d.dim()
        )));
    }
    if new_samples.is_empty() {
        return Ok(d.clone());
    }
    let window = window.max(1);
    let all: Vec<DVector<f64>> = d.atoms.iter().chain(new_samples).cloned().collect();
    let start = all.len().saturating_sub(window);
    Ok(EmpiricalDist { atoms: all[start..].to_vec(), dim: d.dim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{simulate, MsdPlant, NoiseSpec, PlantSim};
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar(v: &[f64]) -> EmpiricalDist {
        EmpiricalDist::from_signal(Signal::scalar(v).unwrap())
    }

    fn run_open_loop(noise: NoiseSpec, steps: usize, seed: u64) -> (Signal, Signal, Signal) {
        let plant = MsdPlant::default();
        let d = plant.discrete().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u =
            Signal::new((0..steps).map(|_| DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0))).collect()).unwrap();
        let (x, y) = simulate(&d, &DVector::zeros(6), &u, &noise, seed + 1).unwrap();
        let xk = x.select_channels(&[0, 1, 2, 3]).unwrap();
        (u, y, xk)
    }

    #[test]
    fn noiseless_residuals_vanish() {
        let part = MsdPlant::default().partition().unwrap();
        let (u, y, xk) = run_open_loop(NoiseSpec::ZERO, 200, 3);
        let (w, v) = estimate_residuals(&part, &u, &y, &xk).unwrap();
        assert_eq!(w.len(), 200);
        assert!(w.atoms().iter().chain(v.atoms()).all(|a| a.norm() <= 1e-10));
    }

    #[test]
    fn constant_injection_round_trip() {
        let plant = MsdPlant::default();
        let part = plant.partition().unwrap();
        let d = plant.discrete().unwrap();
        let mut sim = PlantSim::new(d, DVector::zeros(6), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut us, mut ys, mut xs) = (vec![], vec![], vec![sim.x.rows(0, 4).into_owned()]);
        for _ in 0..100 {
            let u = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            ys.push(sim.measure(&u, 0.0));
            sim.advance(&u, 0.0);
            sim.x[3] += 0.05;
            xs.push(sim.x.rows(0, 4).into_owned());
            us.push(u);
        }
        let (w, _) =
            estimate_residuals(&part, &Signal::new(us).unwrap(), &Signal::new(ys).unwrap(), &Signal::new(xs).unwrap())
                .unwrap();
        let mean = w.mean();
        assert!((mean[3] - 0.05).abs() <= 1e-10);
        assert!(mean.rows(0, 3).amax() <= 1e-10);
    }

    #[test]
    fn residual_statistics() {
        let part = MsdPlant::default().partition().unwrap();
        let (u, y, xk) = run_open_loop(NoiseSpec { sigma_w: 0.1, sigma_v: 0.0 }, 1000, 11);
        let (w, _) = estimate_residuals(&part, &u, &y, &xk).unwrap();
        for s in w.std().iter() {
            assert!((0.08..=0.12).contains(s), "std {s}");
        }
    }

    #[test]
    fn residual_dimension_checks() {
        let part = MsdPlant::default().partition().unwrap();
        let (u, y, xk) = run_open_loop(NoiseSpec::ZERO, 10, 1);
        let bad = y.select_channels(&[0, 1]).unwrap();
        assert!(matches!(estimate_residuals(&part, &u, &bad, &xk), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn w1_examples() {
        let p = scalar(&[0.3, -1.0, 2.0]);
        assert_eq!(w1_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(w1_distance(&scalar(&[0.0]), &scalar(&[1.0])).unwrap(), 1.0);
        assert_eq!(w1_distance(&scalar(&[0.0, 2.0]), &scalar(&[1.0, 3.0])).unwrap(), 1.0);
    }

    #[test]
    fn w1_unequal_counts() {
        // {0, 1} vs {0, 0, 3}: quantile functions differ by 0 on (0, 1/2],
        // 1 on (1/2, 2/3], 2 on (2/3, 1].
        let d = w1_distance(&scalar(&[0.0, 1.0]), &scalar(&[0.0, 0.0, 3.0])).unwrap();
        assert!((d - (1.0 / 6.0 + 2.0 / 3.0)).abs() < 1e-15);
        // Replicated atoms describe the same measure.
        let d = w1_distance(&scalar(&[1.0, 5.0]), &scalar(&[5.0, 1.0, 1.0, 5.0])).unwrap();
        assert!(d.abs() < 1e-15);
    }

    #[test]
    fn w1_rejects_dimension_mismatch() {
        let p = EmpiricalDist::dirac_zero(2);
        let q = EmpiricalDist::dirac_zero(3);
        assert!(w1_distance(&p, &q).is_err());
    }

    #[test]
    fn ball_samples() {
        let center =
            EmpiricalDist::from_signal(Signal::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]]).unwrap());
        let zero = AmbiguitySpec::new(center.clone(), 0.0).unwrap();
        assert_eq!(sample_dist_in_ball(&zero, 4), center);
        let spec = AmbiguitySpec::new(center.clone(), 0.5).unwrap();
        for seed in 0..50 {
            let s = sample_dist_in_ball(&spec, seed);
            assert!(w1_distance(&s, &center).unwrap() <= 0.5 + 1e-12);
        }
        assert_eq!(sample_dist_in_ball(&spec, 8), sample_dist_in_ball(&spec, 8));
        assert!(AmbiguitySpec::new(center, -1.0).is_err());
    }

    #[test]
    fn trivial_scenario() {
        let bx = ThetaBox::degenerate(100.0, 5.0);
        let w = AmbiguitySpec::new(EmpiricalDist::dirac_zero(4), 0.0).unwrap();
        let v = AmbiguitySpec::new(EmpiricalDist::dirac_zero(4), 0.0).unwrap();
        let sc = draw_scenarios(&bx, &w, &v, 1, 20, 0).unwrap();
        assert_eq!(sc.len(), 1);
        assert_eq!(sc[0].theta, MsdParams::nominal());
        assert_eq!(sc[0].horizon(), 20);
        assert!(sc[0].w_path.samples().iter().chain(sc[0].v_path.samples()).all(|s| s.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn scenarios_respect_box_and_seed() {
        let bx = ThetaBox::default();
        let center = EmpiricalDist::from_signal(Signal::from_rows(&[vec![0.1; 4], vec![-0.1; 4]]).unwrap());
        let w = AmbiguitySpec::new(center.clone(), 0.05).unwrap();
        let v = AmbiguitySpec::new(center, 0.005).unwrap();
        let a = draw_scenarios(&bx, &w, &v, 5, 20, 77).unwrap();
        let b = draw_scenarios(&bx, &w, &v, 5, 20, 77).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!((80.0..=120.0).contains(&s.theta.k3()));
            assert!((3.0..=7.0).contains(&s.theta.c3()));
        }
        // Scenario i only depends on seed + i.
        let shifted = draw_scenarios(&bx, &w, &v, 4, 20, 78).unwrap();
        assert_eq!(&a[1..], &shifted[..]);
    }

    #[test]
    fn sliding_window() {
        let d = scalar(&[1.0, 2.0, 3.0]);
        assert_eq!(update_dist(&d, &[], 3).unwrap(), d);
        let u = update_dist(&d, &[DVector::from_element(1, 4.0)], 3).unwrap();
        assert_eq!(u, scalar(&[2.0, 3.0, 4.0]));
        assert!(update_dist(&d, &[DVector::zeros(2)], 3).is_err());
    }

    #[test]
    fn window_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = rand_distr::Normal::new(0.0, 0.1).unwrap();
        let draws: Vec<DVector<f64>> = (0..1000).map(|_| DVector::from_element(1, normal.sample(&mut rng))).collect();
        let d = update_dist(&scalar(&[5.0]), &draws, 1000).unwrap();
        assert_eq!(d.len(), 1000);
        let s = d.std()[0];
        assert!((0.08..=0.12).contains(&s));
    }

    #[test]
    fn csv_round_trip() {
        let d = EmpiricalDist::from_signal(Signal::from_rows(&[vec![0.25, -1.5], vec![3.0, 1e-9]]).unwrap());
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert_eq!(EmpiricalDist::read_csv(&buf[..]).unwrap(), d);
    }

    fn dist_strategy(dim: usize) -> impl Strategy<Value = EmpiricalDist> {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), 1..12)
            .prop_map(|rows| EmpiricalDist::from_signal(Signal::from_rows(&rows).unwrap()))
    }

    proptest! {
        #[test]
        fn w1_is_a_metric(p in dist_strategy(2), q in dist_strategy(2), r in dist_strategy(2)) {
            let pq = w1_distance(&p, &q).unwrap();
            let qp = w1_distance(&q, &p).unwrap();
            let pr = w1_distance(&p, &r).unwrap();
            let rq = w1_distance(&r, &q).unwrap();
            prop_assert!(pq >= 0.0);
            prop_assert!((pq - qp).abs() <= 1e-9);
            prop_assert!(w1_distance(&p, &p).unwrap() <= 1e-12);
            prop_assert!(pq <= pr + rq + 1e-9);
        }

        #[test]
        fn ball_membership(center in dist_strategy(3), radius in 0.0f64..2.0, seed in any::<u64>()) {
            let spec = AmbiguitySpec::new(center.clone(), radius).unwrap();
            let s = sample_dist_in_ball(&spec, seed);
            prop_assert!(w1_distance(&s, &center).unwrap() <= radius + 1e-12);
        }

        #[test]
        fn scenarios_are_pure(seed in any::<u64>(), m in 1usize..4) {
            let bx = ThetaBox::default();
            let w = AmbiguitySpec::new(EmpiricalDist::dirac_zero(4), 0.1).unwrap();
            let v = AmbiguitySpec::new(EmpiricalDist::dirac_zero(4), 0.01).unwrap();
            prop_assert_eq!(
                draw_scenarios(&bx, &w, &v, m, 5, seed).unwrap(),
                draw_scenarios(&bx, &w, &v, m, 5, seed).unwrap()
            );
        }
    }
}
