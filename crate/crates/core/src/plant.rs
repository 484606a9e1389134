//! Triple mass-spring-damper ground truth.
//!
//! The chain is wall -(k1,c1)- m1 -(k2,c2)- m2 -(k3,c3)- m3 with one force
//! actuator per mass. [`build_msd`] returns the continuous model in the natural
//! order `(x1, x2, x3, v1, v2, v3)`; [`MsdPlant`] discretizes it, re-orders the
//! states so that masses 1-2 form a contiguous known block, and attaches the
//! sensor layout used by the controllers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pinv;
use crate::seeds::derive_seed;
use crate::trajkit::{persistently_exciting, Signal};

/// Physical parameters of the three-mass chain, indexed by mass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsdParams {
    pub masses: [f64; 3],
    pub stiffness: [f64; 3],
    pub damping: [f64; 3],
}

impl Default for MsdParams {
    fn default() -> Self {
        Self::nominal()
    }
}

impl MsdParams {
    /// Unit masses, 100 N/m springs, 5 N·s/m dampers.
    pub fn nominal() -> Self {
        Self { masses: [1.0; 3], stiffness: [100.0; 3], damping: [5.0; 3] }
    }

    pub fn k3(&self) -> f64 {
        self.stiffness[2]
    }

    pub fn c3(&self) -> f64 {
        self.damping[2]
    }

    /// Copy with the third spring/damper replaced.
    pub fn with_theta(&self, k3: f64, c3: f64) -> Self {
        let mut p = *self;
        p.stiffness[2] = k3;
        p.damping[2] = c3;
        p
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &m) in self.masses.iter().enumerate() {
            if !(m > 0.0) {
                return Err(Error::NonPositiveMass { index: i + 1, value: m });
            }
        }
        if self.stiffness.iter().chain(self.damping.iter()).any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidParameter("stiffness and damping must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousLTI {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteLTI {
    pub ad: DMatrix<f64>,
    pub bd: DMatrix<f64>,
    pub cd: DMatrix<f64>,
    pub dd: DMatrix<f64>,
    pub ts: f64,
}

impl DiscreteLTI {
    pub fn n_states(&self) -> usize {
        self.ad.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.bd.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.cd.nrows()
    }

    /// Re-orders the state so that new state `i` is old state `perm[i]`.
    pub fn permute_states(&self, perm: &[usize]) -> Result<DiscreteLTI> {
        let n = self.n_states();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidParameter(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        Ok(DiscreteLTI {
            ad: DMatrix::from_fn(n, n, |i, j| self.ad[(perm[i], perm[j])]),
            bd: DMatrix::from_fn(n, self.n_inputs(), |i, j| self.bd[(perm[i], j)]),
            cd: DMatrix::from_fn(self.n_outputs(), n, |i, j| self.cd[(i, perm[j])]),
            dd: self.dd.clone(),
            ts: self.ts,
        })
    }

    /// Same dynamics, different output map (`D` is reset to zero).
    pub fn with_outputs(&self, c: DMatrix<f64>) -> Result<DiscreteLTI> {
        if c.ncols() != self.n_states() {
            return Err(Error::DimensionMismatch(format!(
                "output matrix has {} columns, state has {}",
                c.ncols(),
                self.n_states()
            )));
        }
        let dd = DMatrix::zeros(c.nrows(), self.n_inputs());
        Ok(DiscreteLTI { ad: self.ad.clone(), bd: self.bd.clone(), cd: c, dd, ts: self.ts })
    }
}

/// Block decomposition of a discrete model into known (first `n_k` states,
/// first `p_k` outputs) and unknown parts.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridPartition {
    pub n_k: usize,
    pub n_u: usize,
    pub p_k: usize,
    pub p_u: usize,
    pub a_k: DMatrix<f64>,
    pub a_ku: DMatrix<f64>,
    pub a_uk: DMatrix<f64>,
    pub a_u: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub c_k: DMatrix<f64>,
    pub c_uk: DMatrix<f64>,
    pub c_u: DMatrix<f64>,
    pub d_k: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
}

impl HybridPartition {
    /// Re-assembles `(A, B, C, D)`; the known-output/unknown-state block is zero.
    pub fn assemble(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.n_k + self.n_u;
        let p = self.p_k + self.p_u;
        let m = self.b_k.ncols();
        let mut a = DMatrix::zeros(n, n);
        a.view_mut((0, 0), (self.n_k, self.n_k)).copy_from(&self.a_k);
        a.view_mut((0, self.n_k), (self.n_k, self.n_u)).copy_from(&self.a_ku);
        a.view_mut((self.n_k, 0), (self.n_u, self.n_k)).copy_from(&self.a_uk);
        a.view_mut((self.n_k, self.n_k), (self.n_u, self.n_u)).copy_from(&self.a_u);
        let mut b = DMatrix::zeros(n, m);
        b.rows_mut(0, self.n_k).copy_from(&self.b_k);
        b.rows_mut(self.n_k, self.n_u).copy_from(&self.b_u);
        let mut c = DMatrix::zeros(p, n);
        c.view_mut((0, 0), (self.p_k, self.n_k)).copy_from(&self.c_k);
        c.view_mut((self.p_k, 0), (self.p_u, self.n_k)).copy_from(&self.c_uk);
        c.view_mut((self.p_k, self.n_k), (self.p_u, self.n_u)).copy_from(&self.c_u);
        let mut d = DMatrix::zeros(p, m);
        d.rows_mut(0, self.p_k).copy_from(&self.d_k);
        d.rows_mut(self.p_k, self.p_u).copy_from(&self.d_u);
        (a, b, c, d)
    }

    /// Matrix that replaces `A_ku x_u` by `A_y y_u` in the known-state update:
    /// `A_y = A_ku C_u^+`. Exact whenever `C_u` is injective and `C_uk = 0`.
    pub fn coupling_matrix(&self) -> DMatrix<f64> {
        &self.a_ku * pinv(&self.c_u)
    }
}

pub fn partition_hybrid(d: &DiscreteLTI, n_k: usize, p_k: usize) -> Result<HybridPartition> {
    let n = d.n_states();
    let p = d.n_outputs();
    if n_k == 0 || n_k >= n {
        return Err(Error::BadSplit(format!("need 0 < n_k < {n}, got {n_k}")));
    }
    if p_k > p {
        return Err(Error::BadSplit(format!("p_k = {p_k} exceeds {p} outputs")));
    }
    let n_u = n - n_k;
    let p_u = p - p_k;
    let m = d.n_inputs();
    let feedthrough = d.cd.view((0, n_k), (p_k, n_u));
    if feedthrough.iter().any(|v| v.abs() > 1e-12) {
        return Err(Error::BadSplit("known outputs must not depend on the unknown state".into()));
    }
    Ok(HybridPartition {
        n_k,
        n_u,
        p_k,
        p_u,
        a_k: d.ad.view((0, 0), (n_k, n_k)).into_owned(),
        a_ku: d.ad.view((0, n_k), (n_k, n_u)).into_owned(),
        a_uk: d.ad.view((n_k, 0), (n_u, n_k)).into_owned(),
        a_u: d.ad.view((n_k, n_k), (n_u, n_u)).into_owned(),
        b_k: d.bd.view((0, 0), (n_k, m)).into_owned(),
        b_u: d.bd.view((n_k, 0), (n_u, m)).into_owned(),
        c_k: d.cd.view((0, 0), (p_k, n_k)).into_owned(),
        c_uk: d.cd.view((p_k, 0), (p_u, n_k)).into_owned(),
        c_u: d.cd.view((p_k, n_k), (p_u, n_u)).into_owned(),
        d_k: d.dd.view((0, 0), (p_k, m)).into_owned(),
        d_u: d.dd.view((p_k, 0), (p_u, m)).into_owned(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Process-noise standard deviation on every state channel.
    pub sigma_w: f64,
    /// Measurement-noise standard deviation on every output channel.
    pub sigma_v: f64,
}

impl NoiseSpec {
    pub const ZERO: NoiseSpec = NoiseSpec { sigma_w: 0.0, sigma_v: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_w >= 0.0 && self.sigma_v >= 0.0) {
            return Err(Error::InvalidParameter("noise standard deviations must be >= 0".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> NoiseSpec {
        NoiseSpec { sigma_w: self.sigma_w * factor, sigma_v: self.sigma_v * factor }
    }
}

/// Uncertainty box for the third spring and damper.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaBox {
    pub k3_range: [f64; 2],
    pub c3_range: [f64; 2],
}

impl Default for ThetaBox {
    fn default() -> Self {
        Self { k3_range: [80.0, 120.0], c3_range: [3.0, 7.0] }
    }
}

impl ThetaBox {
    pub fn degenerate(k3: f64, c3: f64) -> Self {
        Self { k3_range: [k3, k3], c3_range: [c3, c3] }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ok(self.k3_range) || !ok(self.c3_range) {
            return Err(Error::InvalidParameter(format!("invalid theta box {self:?}")));
        }
        Ok(())
    }

    /// Draws `(k3, c3)` uniformly from the box.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        let pick = |rng: &mut R, r: [f64; 2]| {
            let u: f64 = rng.gen();
            r[0] + u * (r[1] - r[0])
        };
        let k3 = pick(rng, self.k3_range);
        let c3 = pick(rng, self.c3_range);
        (k3, c3)
    }
}

/// Continuous chain model, states `(x1, x2, x3, v1, v2, v3)`, outputs the positions.
pub fn build_msd(p: &MsdParams) -> Result<ContinuousLTI> {
    p.validate()?;
    let [m1, m2, m3] = p.masses;
    let [k1, k2, k3] = p.stiffness;
    let [c1, c2, c3] = p.damping;
    let stiff = DMatrix::from_row_slice(3, 3, &[-(k1 + k2), k2, 0.0, k2, -(k2 + k3), k3, 0.0, k3, -k3]);
    let damp = DMatrix::from_row_slice(3, 3, &[-(c1 + c2), c2, 0.0, c2, -(c2 + c3), c3, 0.0, c3, -c3]);
    let inv_m = [1.0 / m1, 1.0 / m2, 1.0 / m3];
    let mut a = DMatrix::zeros(6, 6);
    let mut b = DMatrix::zeros(6, 3);
    for i in 0..3 {
        a[(i, 3 + i)] = 1.0;
        for j in 0..3 {
            a[(3 + i, j)] = stiff[(i, j)] * inv_m[i];
            a[(3 + i, 3 + j)] = damp[(i, j)] * inv_m[i];
        }
        b[(3 + i, i)] = inv_m[i];
    }
    let mut c = DMatrix::zeros(3, 6);
    for i in 0..3 {
        c[(i, i)] = 1.0;
    }
    Ok(ContinuousLTI { a, b, c, d: DMatrix::zeros(3, 3) })
}

/// Exact zero-order-hold discretization via the exponential of
/// `[[A, B], [0, 0]] * Ts`.
pub fn discretize_zoh(c: &ContinuousLTI, ts: f64) -> Result<DiscreteLTI> {
    if !(ts > 0.0) {
        return Err(Error::InvalidParameter(format!("sample time must be positive, got {ts}")));
    }
    let n = c.a.nrows();
    let m = c.b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&c.a * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(&c.b * ts));
    let e = aug.exp();
    Ok(DiscreteLTI {
        ad: e.view((0, 0), (n, n)).into_owned(),
        bd: e.view((0, n), (n, m)).into_owned(),
        cd: c.c.clone(),
        dd: c.d.clone(),
        ts,
    })
}

/// State order placing masses 1-2 first: `(x1, x2, v1, v2, x3, v3)` in terms of
/// the natural order of [`build_msd`].
pub const HYBRID_ORDER: [usize; 6] = [0, 1, 3, 4, 2, 5];

/// Number of known states (positions and velocities of masses 1-2).
pub const KNOWN_STATES: usize = 4;
/// Known outputs: positions of masses 1-2.
pub const KNOWN_OUTPUTS: usize = 2;
/// Tracked outputs: the three positions, which are always the first outputs.
pub const TRACKED_OUTPUTS: usize = 3;

/// Discrete plant in hybrid state order with its sensor layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsdPlant {
    pub params: MsdParams,
    pub ts: f64,
    /// Adds the velocity of mass 3 to the unknown-subsystem outputs.
    pub measure_unknown_velocity: bool,
}

impl Default for MsdPlant {
    fn default() -> Self {
        Self { params: MsdParams::nominal(), ts: 0.1, measure_unknown_velocity: true }
    }
}

impl MsdPlant {
    pub fn with_params(&self, params: MsdParams) -> MsdPlant {
        MsdPlant { params, ..self.clone() }
    }

    pub fn n_outputs(&self) -> usize {
        if self.measure_unknown_velocity {
            4
        } else {
            3
        }
    }

    /// Output channels measured on the unknown subsystem.
    pub fn unknown_output_channels(&self) -> Vec<usize> {
        (KNOWN_OUTPUTS..self.n_outputs()).collect()
    }

    /// Output map in hybrid state order: `x1, x2, x3` and optionally `v3`.
    pub fn output_matrix(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.n_outputs(), 6);
        c[(0, 0)] = 1.0;
        c[(1, 1)] = 1.0;
        c[(2, 4)] = 1.0;
        if self.measure_unknown_velocity {
            c[(3, 5)] = 1.0;
        }
        c
    }

    pub fn discrete(&self) -> Result<DiscreteLTI> {
        let cont = build_msd(&self.params)?;
        discretize_zoh(&cont, self.ts)?.permute_states(&HYBRID_ORDER)?.with_outputs(self.output_matrix())
    }

    pub fn partition(&self) -> Result<HybridPartition> {
        partition_hybrid(&self.discrete()?, KNOWN_STATES, KNOWN_OUTPUTS)
    }
}

/// Step-wise simulator `x+ = Ad x + Bd u + w`, `y = Cd x + Dd u + v`.
#[derive(Clone, Debug)]
pub struct PlantSim {
    pub model: DiscreteLTI,
    pub x: DVector<f64>,
    rng: ChaCha8Rng,
    w_dist: Normal<f64>,
}

impl PlantSim {
    pub fn new(model: DiscreteLTI, x0: DVector<f64>, seed: u64) -> Result<Self> {
        if x0.len() != model.n_states() {
            return Err(Error::DimensionMismatch(format!(
                "initial state has dimension {}, model has {}",
                x0.len(),
                model.n_states()
            )));
        }
        Ok(Self {
            model,
            x: x0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            w_dist: Normal::new(0.0, 1.0).expect("unit normal"),
        })
    }

    fn gaussian(&mut self, len: usize, sigma: f64) -> DVector<f64> {
        if sigma == 0.0 {
            return DVector::zeros(len);
        }
        DVector::from_fn(len, |_, _| sigma * self.w_dist.sample(&mut self.rng))
    }

    /// Measures the current output under input `u` (measurement noise drawn).
    pub fn measure(&mut self, u: &DVector<f64>, sigma_v: f64) -> DVector<f64> {
        let v = self.gaussian(self.model.n_outputs(), sigma_v);
        &self.model.cd * &self.x + &self.model.dd * u + v
    }

    /// Advances the state; returns the injected process noise.
    pub fn advance(&mut self, u: &DVector<f64>, sigma_w: f64) -> DVector<f64> {
        let w = self.gaussian(self.model.n_states(), sigma_w);
        self.x = &self.model.ad * &self.x + &self.model.bd * u + &w;
        w
    }
}

/// Open-loop simulation. Returns the states `x_0..x_T` and outputs `y_0..y_{T-1}`.
pub fn simulate(
    d: &DiscreteLTI,
    x0: &DVector<f64>,
    u_seq: &Signal,
    noise: &NoiseSpec,
    rng_seed: u64,
) -> Result<(Signal, Signal)> {
    noise.validate()?;
    if u_seq.dim() != d.n_inputs() {
        return Err(Error::DimensionMismatch(format!(
            "input signal has dimension {}, model has {} inputs",
            u_seq.dim(),
            d.n_inputs()
        )));
    }
    let mut sim = PlantSim::new(d.clone(), x0.clone(), rng_seed)?;
    let mut states = vec![x0.clone()];
    let mut outputs = Vec::with_capacity(u_seq.len());
    for u in u_seq.samples() {
        outputs.push(sim.measure(u, noise.sigma_v));
        sim.advance(u, noise.sigma_w);
        states.push(sim.x.clone());
    }
    Ok((Signal::new(states)?, Signal::new(outputs)?))
}

/// Draws `(k3, c3)` from the box; every other parameter stays nominal.
pub fn sample_theta(bx: &ThetaBox, rng_seed: u64) -> Result<MsdParams> {
    sample_theta_from(&MsdParams::nominal(), bx, rng_seed)
}

/// Like [`sample_theta`] but around an arbitrary base parameter set.
pub fn sample_theta_from(base: &MsdParams, bx: &ThetaBox, rng_seed: u64) -> Result<MsdParams> {
    bx.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (k3, c3) = bx.draw(&mut rng);
    Ok(base.with_theta(k3, c3))
}

/// Offline experiment data.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectedData {
    /// Excitation input.
    pub u_d: Signal,
    /// Unknown-subsystem output slice of the measurements.
    pub y_u_d: Signal,
    /// All measured outputs.
    pub y_d: Signal,
    /// Known-block states `x_0..x_T`.
    pub x_known_d: Signal,
    /// Seed actually used for the excitation (differs from the request after a resample).
    pub seed_used: u64,
}

/// Runs an open-loop experiment from rest with i.i.d. `Uniform(-a, a)` inputs.
///
/// The input must be persistently exciting of order `pe_order`; one resample
/// with a derived seed is attempted before giving up.
pub fn collect_data(
    d: &DiscreteLTI,
    part: &HybridPartition,
    t: usize,
    excitation_amplitude: f64,
    noise: &NoiseSpec,
    rng_seed: u64,
    pe_order: usize,
) -> Result<CollectedData> {
    if !(excitation_amplitude >= 0.0) {
        return Err(Error::InvalidParameter("excitation amplitude must be >= 0".into()));
    }
    let m = d.n_inputs();
    let mut seed = rng_seed;
    let mut u_d = None;
    for attempt in 0..2 {
        if attempt > 0 {
            seed = derive_seed(rng_seed, "excitation-retry");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = excitation_amplitude;
        let u = Signal::new(
            (0..t).map(|_| DVector::from_fn(m, |_, _| if a > 0.0 { rng.gen_range(-a..a) } else { 0.0 })).collect(),
        )?;
        if persistently_exciting(&u, pe_order)? {
            u_d = Some(u);
            break;
        }
    }
    let u_d = u_d.ok_or(Error::ExcitationFailed { order: pe_order })?;
    let x0 = DVector::zeros(d.n_states());
    let (states, y_d) = simulate(d, &x0, &u_d, noise, derive_seed(seed, "collect-noise"))?;
    let unknown: Vec<usize> = (part.p_k..part.p_k + part.p_u).collect();
    let known: Vec<usize> = (0..part.n_k).collect();
    Ok(CollectedData {
        y_u_d: y_d.select_channels(&unknown)?,
        x_known_d: states.select_channels(&known)?,
        u_d,
        y_d,
        seed_used: seed,
    })
}
