use mdr_deepc::ambiguity::{draw_scenarios_from, AmbiguitySpec};
use mdr_deepc::bench::{build_controller, offline_data, ExperimentConfig};
use mdr_deepc::controllers::*;
use mdr_deepc::plant::*;
use mdr_deepc::qpcore::{solve, SolveStatus};
use mdr_deepc::trajkit::Signal;
use mdr_deepc::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noiseless() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.noise = NoiseSpec::ZERO;
    cfg.sample_true_theta = false;
    cfg.theta_box = ThetaBox::degenerate(100.0, 5.0);
    cfg.disturbance.noise_factor = 1.0;
    cfg.disturbance.force = vec![0.0; 3];
    for k in ControllerKind::ALL {
        let c = cfg.controller_mut(k);
        c.scenarios = 1;
        c.eps_w = 0.0;
        c.eps_v = 0.0;
        c.lambda_g = 0.0;
        c.hard_initial_condition = true;
    }
    cfg
}

fn step_ref(n: usize, level: f64) -> Signal {
    Signal::new(vec![DVector::from_element(3, level); n]).unwrap()
}

/// Drives the true plant with random inputs for `t_ini` steps from a random state.
fn warm_start(truth: &DiscreteLTI, t_ini: usize, seed: u64) -> (IoBuffers, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = DVector::from_fn(truth.n_states(), |_, _| rng.gen_range(-0.5..0.5));
    let mut sim = PlantSim::new(truth.clone(), x0, seed).unwrap();
    let mut buf = IoBuffers::new(t_ini);
    for _ in 0..t_ini {
        let u = DVector::from_fn(3, |_, _| rng.gen_range(-5.0..5.0));
        let y = sim.measure(&u, 0.0);
        buf.push(u.clone(), y);
        sim.advance(&u, 0.0);
    }
    (buf, sim.x.clone())
}

fn tracked_blocks(data: &CollectedData, cfg: &ControllerConfig) -> DataBlocks {
    let y = data.y_d.select_channels(&[0, 1, 2]).unwrap();
    DataBlocks::new(&data.u_d, &y, cfg.t_ini, cfg.horizon).unwrap()
}

#[test]
fn equilibrium_needs_no_input() {
    let cfg = ExperimentConfig::default();
    let (truth, data) = offline_data(&cfg, ControllerKind::Deepc, 0).unwrap();
    let blocks = tracked_blocks(&data, &cfg.deepc);
    let mut buf = IoBuffers::new(cfg.deepc.t_ini);
    for _ in 0..cfg.deepc.t_ini {
        buf.push(DVector::zeros(3), DVector::zeros(3));
    }
    let r = step_ref(cfg.deepc.horizon, 0.0);
    let f = build_deepc(&blocks, &cfg.deepc, &buf, &r).unwrap();
    let s = solve(&f.problem, 1e-8).unwrap();
    assert_eq!(s.status, SolveStatus::Optimal);
    assert!(f.first_input(&s.z_star).norm() <= 1e-6);

    let f = build_mpc_oracle(&truth, &cfg.oracle, &DVector::zeros(6), &r).unwrap();
    let s = solve(&f.problem, 1e-8).unwrap();
    assert!(f.first_input(&s.z_star).norm() <= 1e-6);
}

#[test]
fn zero_input_box_pins_the_input() {
    let mut cfg = ExperimentConfig::default();
    for k in ControllerKind::ALL {
        cfg.controller_mut(k).u_bounds = Some(vec![[0.0, 0.0]; 3]);
    }
    let (truth, data) = offline_data(&cfg, ControllerKind::Deepc, 1).unwrap();
    let (buf, x) = warm_start(&truth, cfg.deepc.t_ini, 3);
    let r = step_ref(cfg.deepc.horizon, 1.0);
    let buf3 = {
        let mut b = IoBuffers::new(buf.t_ini());
        for (u, y) in buf.inputs().zip(buf.outputs()) {
            b.push(u.clone(), y.rows(0, 3).into_owned());
        }
        b
    };
    let forms = [
        build_deepc(&tracked_blocks(&data, &cfg.deepc), &cfg.deepc, &buf3, &r).unwrap(),
        build_mpc_oracle(&truth, &cfg.oracle, &x, &r).unwrap(),
    ];
    for f in forms {
        let s = solve(&f.problem, 1e-8).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!(f.inputs(&s.z_star).to_vec().amax() <= 1e-9);
        assert!(s.t_star > 1.0);
    }
}

struct MdrFixture {
    model: MdrModel,
    blocks: DataBlocks,
    cfg: ControllerConfig,
    xk: DVector<f64>,
    buf: IoBuffers,
    scenarios: Vec<mdr_deepc::ambiguity::Scenario>,
}

fn mdr_fixture(seed: u64) -> MdrFixture {
    let cfg = ExperimentConfig::default();
    let (truth, data) = offline_data(&cfg, ControllerKind::Mdr, seed).unwrap();
    let ctrl = build_controller(&cfg, ControllerKind::Mdr, &truth, &data).unwrap();
    let model = MdrModel::new(cfg.plant.clone(), cfg.theta_box).unwrap();
    let c = cfg.mdr.clone();
    let blocks = DataBlocks::new(&data.u_d, &data.y_u_d, c.t_ini, c.horizon).unwrap();
    let (buf, x) = warm_start(&truth, c.t_ini, seed + 100);
    let w = ctrl.w_center().unwrap().clone();
    let v = mdr_deepc::ambiguity::EmpiricalDist::dirac_zero(4);
    let scenarios = draw_scenarios_from(
        &cfg.plant.params,
        &cfg.theta_box,
        &AmbiguitySpec::new(w, c.eps_w).unwrap(),
        &AmbiguitySpec::new(v, c.eps_v).unwrap(),
        c.scenarios,
        c.horizon,
        seed,
    )
    .unwrap();
    MdrFixture { model, blocks, cfg: c, xk: x.rows(0, 4).into_owned(), buf, scenarios }
}

#[test]
fn scenario_order_does_not_change_the_input() {
    let f = mdr_fixture(2);
    let r = step_ref(f.cfg.horizon, 1.0);
    let a = build_mdr(&f.model, &f.blocks, &f.cfg, &f.xk, &f.buf, &f.scenarios, &r).unwrap();
    let mut rev = f.scenarios.clone();
    rev.reverse();
    let b = build_mdr(&f.model, &f.blocks, &f.cfg, &f.xk, &f.buf, &rev, &r).unwrap();
    let sa = solve(&a.problem, 1e-9).unwrap();
    let sb = solve(&b.problem, 1e-9).unwrap();
    assert_eq!(sa.status, SolveStatus::Optimal);
    assert_eq!(sb.status, SolveStatus::Optimal);
    let (ua, ub) = (a.first_input(&sa.z_star), b.first_input(&sb.z_star));
    assert!((&ua - &ub).amax() <= 1e-8 * (1.0 + ua.amax()), "{ua} vs {ub}");
}

#[test]
fn epigraph_is_tight() {
    for seed in 0..3 {
        let f = mdr_fixture(seed);
        let r = step_ref(f.cfg.horizon, 1.0);
        let form = build_mdr(&f.model, &f.blocks, &f.cfg, &f.xk, &f.buf, &f.scenarios, &r).unwrap();
        let s = solve(&form.problem, 1e-6).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        let costs: Vec<f64> = form.problem.costs().iter().map(|c| c.value(&s.z_star)).collect();
        let scale = 1.0 + s.t_star.abs();
        assert!(costs.iter().all(|&c| c <= s.t_star + 1e-6 * scale));
        let top = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((top - s.t_star).abs() <= 1e-6 * scale);
    }
}

#[test]
fn mdr_rejects_wrong_scenario_count_and_cold_buffers() {
    let f = mdr_fixture(0);
    let r = step_ref(f.cfg.horizon, 1.0);
    let err = build_mdr(&f.model, &f.blocks, &f.cfg, &f.xk, &f.buf, &f.scenarios[..1], &r).unwrap_err();
    assert!(matches!(err, Error::ScenarioCountMismatch { .. }));
    let cold = IoBuffers::new(f.cfg.t_ini);
    let err = build_mdr(&f.model, &f.blocks, &f.cfg, &f.xk, &cold, &f.scenarios, &r).unwrap_err();
    assert!(matches!(err, Error::BuffersNotWarm { .. }));
}

#[test]
fn remap_at_nominal_reproduces_the_partition() {
    let model = MdrModel::new(MsdPlant::default(), ThetaBox::default()).unwrap();
    let a = model.nominal_blocks();
    let b = model.remap(&MsdParams::nominal()).unwrap();
    for (x, y) in [(&a.a_k, &b.a_k), (&a.a_y, &b.a_y), (&a.b_k, &b.b_k), (&a.c_k, &b.c_k), (&a.d_k, &b.d_k)] {
        assert!((x - y).amax() <= 1e-12);
    }
    let p = MsdPlant::default().partition().unwrap();
    assert!((&a.a_k - &p.a_k).amax() <= 1e-12);
    assert!((&a.b_k - &p.b_k).amax() <= 1e-12);
}

fn scalar_cfg(q: f64, r: f64, horizon: usize) -> ControllerConfig {
    ControllerConfig { t_ini: 1, horizon, q: vec![vec![q]], r: vec![vec![r]], ..ControllerConfig::default() }
}

#[test]
fn oracle_one_step_scalar_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (a, b, c, d) =
            (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
        let (q, rw) = (rng.gen_range(0.1..10.0), rng.gen_range(0.01..1.0));
        let sys = DiscreteLTI {
            ad: DMatrix::from_element(1, 1, a),
            bd: DMatrix::from_element(1, 1, b),
            cd: DMatrix::from_element(1, 1, c),
            dd: DMatrix::from_element(1, 1, d),
            ts: 0.1,
        };
        let x: f64 = rng.gen_range(-1.0..1.0);
        let rr: f64 = rng.gen_range(-1.0..1.0);
        let f = build_mpc_oracle(
            &sys,
            &scalar_cfg(q, rw, 1),
            &DVector::from_element(1, x),
            &Signal::scalar(&[rr]).unwrap(),
        )
        .unwrap();
        let s = solve(&f.problem, 1e-10).unwrap();
        let expected = q * d * (rr - c * x) / (q * d * d + rw);
        assert!((s.z_star[0] - expected).abs() <= 1e-8, "{} vs {expected}", s.z_star[0]);
    }
}

#[test]
fn oracle_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let nx = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=2);
        let p = rng.gen_range(1..=2);
        let n = rng.gen_range(1..=6);
        let sys = DiscreteLTI {
            ad: DMatrix::from_fn(nx, nx, |_, _| rng.gen_range(-0.6..0.6)),
            bd: DMatrix::from_fn(nx, m, |_, _| rng.gen_range(-1.0..1.0)),
            cd: DMatrix::from_fn(p, nx, |_, _| rng.gen_range(-1.0..1.0)),
            dd: DMatrix::from_fn(p, m, |_, _| rng.gen_range(-0.2..0.2)),
            ts: 0.1,
        };
        let q = DMatrix::from_fn(p, p, |i, j| if i == j { rng.gen_range(0.5..2.0) } else { 0.0 });
        let rw = DMatrix::from_fn(m, m, |i, j| if i == j { rng.gen_range(0.1..1.0) } else { 0.0 });
        let cfg = ControllerConfig {
            t_ini: 1,
            horizon: n,
            q: (0..p).map(|i| q.row(i).iter().cloned().collect()).collect(),
            r: (0..m).map(|i| rw.row(i).iter().cloned().collect()).collect(),
            ..ControllerConfig::default()
        };
        let x = DVector::from_fn(nx, |_, _| rng.gen_range(-1.0..1.0));
        let r = Signal::new((0..n).map(|_| DVector::from_fn(p, |_, _| rng.gen_range(-1.0..1.0))).collect()).unwrap();
        let f = build_mpc_oracle(&sys, &cfg, &x, &r).unwrap();
        let s = solve(&f.problem, 1e-10).unwrap();

        // Markov-parameter prediction: y_t = C A^t x + D u_t + sum_{j<t} C A^{t-1-j} B u_j.
        let mut gm = DMatrix::zeros(n * p, n * m);
        let mut free = DVector::zeros(n * p);
        for t in 0..n {
            free.rows_mut(t * p, p).copy_from(&(&sys.cd * sys.ad.pow(t as u32) * &x));
            gm.view_mut((t * p, t * m), (p, m)).copy_from(&sys.dd);
            for j in 0..t {
                let blk = &sys.cd * sys.ad.pow((t - 1 - j) as u32) * &sys.bd;
                gm.view_mut((t * p, j * m), (p, m)).copy_from(&blk);
            }
        }
        let wq = DMatrix::from_fn(n * p, n * p, |i, j| if i / p == j / p { q[(i % p, j % p)] } else { 0.0 });
        let wr = DMatrix::from_fn(n * m, n * m, |i, j| if i / m == j / m { rw[(i % m, j % m)] } else { 0.0 });
        let h = gm.transpose() * &wq * &gm + wr;
        let rhs = gm.transpose() * &wq * (r.to_vec() - free);
        let u = h.cholesky().unwrap().solve(&rhs);
        assert!((&s.z_star - &u).amax() <= 1e-8, "{} vs {}", s.z_star, u);
    }
}

#[test]
fn single_step_reduction_to_the_oracle() {
    let cfg = noiseless();
    let (truth, data) = offline_data(&cfg, ControllerKind::Mdr, 0).unwrap();
    let c = cfg.mdr.clone();
    let model = MdrModel::new(cfg.plant.clone(), cfg.theta_box).unwrap();
    let blocks = DataBlocks::new(&data.u_d, &data.y_u_d, c.t_ini, c.horizon).unwrap();
    let zero = |d| AmbiguitySpec::new(mdr_deepc::ambiguity::EmpiricalDist::dirac_zero(d), 0.0).unwrap();
    let scen = draw_scenarios_from(&cfg.plant.params, &cfg.theta_box, &zero(4), &zero(4), 1, c.horizon, 0).unwrap();
    let r = step_ref(c.horizon, 1.0);
    for seed in 0..5 {
        let (buf, x) = warm_start(&truth, c.t_ini, seed);
        let fm = build_mdr(&model, &blocks, &c, &x.rows(0, 4).into_owned(), &buf, &scen, &r).unwrap();
        let fo = build_mpc_oracle(&truth, &cfg.oracle, &x, &r).unwrap();
        let sm = solve(&fm.problem, 1e-9).unwrap();
        let so = solve(&fo.problem, 1e-9).unwrap();
        let (um, uo) = (fm.first_input(&sm.z_star), fo.first_input(&so.z_star));
        assert!((&um - &uo).amax() <= 1e-4, "seed {seed}: {um} vs {uo}");
    }
}

#[test]
fn receding_step_is_deterministic_and_shifts_buffers() {
    let cfg = ExperimentConfig::default();
    let (truth, data) = offline_data(&cfg, ControllerKind::Mdr, 3).unwrap();
    let base = build_controller(&cfg, ControllerKind::Mdr, &truth, &data).unwrap();
    let (warm, x) = warm_start(&truth, cfg.mdr.t_ini, 9);
    let r = step_ref(cfg.mdr.horizon, 1.0);
    let mut a = base.clone();
    let mut b = base.clone();
    let ys: Vec<DVector<f64>> = warm.outputs().cloned().collect();
    let mut applied = Vec::new();
    for (k, y) in ys.iter().chain(ys.iter()).enumerate() {
        let sa = a.receding_step(y, &x, &r, 40 + k as u64).unwrap();
        let sb = b.receding_step(y, &x, &r, 40 + k as u64).unwrap();
        assert_eq!(sa.u_applied, sb.u_applied);
        assert_eq!(a.buffers().inputs().last().unwrap(), &sa.u_applied);
        applied.push((sa.u_applied.clone(), y.clone()));
        if k < cfg.mdr.t_ini {
            assert!(sa.solver_status.is_none());
            assert_eq!(sa.u_applied, DVector::zeros(3));
        } else {
            assert_eq!(sa.solver_status, Some(SolveStatus::Optimal));
            assert_eq!(sa.per_scenario_costs.len(), cfg.mdr.scenarios);
        }
    }
    let tail = &applied[applied.len() - cfg.mdr.t_ini..];
    let got: Vec<_> = a.buffers().inputs().cloned().zip(a.buffers().outputs().cloned()).collect();
    assert_eq!(got, tail.to_vec());
}

#[test]
fn integral_action_shifts_the_reference() {
    let mut cfg = ExperimentConfig::default();
    cfg.oracle.integral_action = true;
    let (truth, data) = offline_data(&cfg, ControllerKind::Oracle, 0).unwrap();
    let mut plain = build_controller(&ExperimentConfig::default(), ControllerKind::Oracle, &truth, &data).unwrap();
    let mut integ = build_controller(&cfg, ControllerKind::Oracle, &truth, &data).unwrap();
    let r = step_ref(cfg.oracle.horizon, 1.0);
    let y = DVector::zeros(4);
    let x = DVector::zeros(6);
    let mut last = (DVector::zeros(3), DVector::zeros(3));
    for k in 0..6 {
        last = (
            plain.receding_step(&y, &x, &r, k).unwrap().u_applied,
            integ.receding_step(&y, &x, &r, k).unwrap().u_applied,
        );
    }
    // A persistent error pushes the integrating controller harder.
    assert!(last.1.sum() > last.0.sum());
}

#[test]
fn failed_solves_hold_the_previous_input() {
    let mut cfg = ExperimentConfig::default();
    // No iterate can meet this tolerance.
    cfg.oracle.solver_tol = 1e-300;
    let (truth, data) = offline_data(&cfg, ControllerKind::Oracle, 0).unwrap();
    let mut ctrl = build_controller(&cfg, ControllerKind::Oracle, &truth, &data).unwrap();
    let r = step_ref(cfg.oracle.horizon, 1.0);
    for k in 0..cfg.oracle.t_ini + 3 {
        let step = ctrl.receding_step(&DVector::zeros(4), &DVector::zeros(6), &r, k as u64).unwrap();
        assert_eq!(step.u_applied, DVector::zeros(3));
        assert_eq!(step.fallback, k >= cfg.oracle.t_ini);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn wider_input_bounds_never_raise_the_optimum(seed in 0u64..1000, lo in 0.0f64..150.0, extra in 0.0f64..100.0) {
        let cfg = ExperimentConfig::default();
        let (truth, _) = offline_data(&cfg, ControllerKind::Oracle, 0).unwrap();
        let (_, x) = warm_start(&truth, 1, seed);
        let r = step_ref(cfg.oracle.horizon, 1.0);
        let mut narrow = cfg.oracle.clone();
        narrow.u_bounds = Some(vec![[-lo, lo]; 3]);
        let mut wide = cfg.oracle.clone();
        wide.u_bounds = Some(vec![[-lo - extra, lo + extra]; 3]);
        let sn = solve(&build_mpc_oracle(&truth, &narrow, &x, &r).unwrap().problem, 1e-8).unwrap();
        let sw = solve(&build_mpc_oracle(&truth, &wide, &x, &r).unwrap().problem, 1e-8).unwrap();
        prop_assert_eq!(sn.status, SolveStatus::Optimal);
        prop_assert_eq!(sw.status, SolveStatus::Optimal);
        prop_assert!(sw.t_star <= sn.t_star + 1e-6 * (1.0 + sn.t_star.abs()));
    }

    #[test]
    fn buffers_hold_the_latest_window(len in 1usize..30, t_ini in 1usize..6) {
        let mut buf = IoBuffers::new(t_ini);
        let pairs: Vec<(DVector<f64>, DVector<f64>)> = (0..len)
            .map(|k| (DVector::from_element(3, k as f64), DVector::from_element(4, -(k as f64))))
            .collect();
        for (u, y) in &pairs {
            buf.push(u.clone(), y.clone());
        }
        prop_assert_eq!(buf.is_warm(), len >= t_ini);
        let keep = len.min(t_ini);
        let got: Vec<_> = buf.inputs().cloned().zip(buf.outputs().cloned()).collect();
        prop_assert_eq!(got, pairs[len - keep..].to_vec());
    }
}
