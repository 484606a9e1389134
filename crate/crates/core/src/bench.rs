//! Closed-loop experiments on the three-mass chain and the tracking metrics.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ambiguity::estimate_residuals;
use crate::controllers::{ControlStep, Controller, ControllerConfig, ControllerKind, DataBlocks, MdrModel};
use crate::error::{Error, Result};
use crate::plant::{
    collect_data, sample_theta_from, CollectedData, DiscreteLTI, MsdParams, MsdPlant, NoiseSpec, PlantSim, ThetaBox,
    TRACKED_OUTPUTS,
};
use crate::seeds::{derive_seed, fnv1a};
use crate::trajkit::Signal;

/// Extra disturbance applied on the steps `start..=end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub start: usize,
    pub end: usize,
    /// Multiplies both noise standard deviations.
    pub noise_factor: f64,
    /// Added to the plant input, one entry per input channel.
    pub force: Vec<f64>,
}

impl Default for Disturbance {
    fn default() -> Self {
        Self { start: 5, end: 15, noise_factor: 10.0, force: vec![0.0, 0.0, 1.0] }
    }
}

impl Disturbance {
    pub fn active(&self, k: usize) -> bool {
        k >= self.start && k <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: MsdPlant,
    pub theta_box: ThetaBox,
    pub noise: NoiseSpec,
    /// Draw the true `(k3, c3)` from `theta_box` per seed; otherwise the plant
    /// parameters are the truth.
    pub sample_true_theta: bool,
    pub excitation_amplitude: f64,
    pub t_data: usize,
    pub t_run: usize,
    pub disturbance: Disturbance,
    /// Step reference level per tracked output, applied from step 0.
    pub reference: Vec<f64>,
    pub deepc: ControllerConfig,
    pub mdr: ControllerConfig,
    pub oracle: ControllerConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            plant: MsdPlant::default(),
            theta_box: ThetaBox::default(),
            noise: NoiseSpec { sigma_w: 0.1, sigma_v: 0.01 },
            sample_true_theta: true,
            excitation_amplitude: 10.0,
            t_data: 150,
            t_run: 150,
            disturbance: Disturbance::default(),
            reference: vec![1.0; TRACKED_OUTPUTS],
            deepc: ControllerConfig::default(),
            mdr: ControllerConfig::default(),
            oracle: ControllerConfig::default(),
            seeds: (0..10).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn controller(&self, kind: ControllerKind) -> &ControllerConfig {
        match kind {
            ControllerKind::Deepc => &self.deepc,
            ControllerKind::Mdr => &self.mdr,
            ControllerKind::Oracle => &self.oracle,
        }
    }

    pub fn controller_mut(&mut self, kind: ControllerKind) -> &mut ControllerConfig {
        match kind {
            ControllerKind::Deepc => &mut self.deepc,
            ControllerKind::Mdr => &mut self.mdr,
            ControllerKind::Oracle => &mut self.oracle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.params.validate()?;
        if !(self.plant.ts > 0.0) {
            return Err(Error::InvalidParameter("sample time must be > 0".into()));
        }
        self.theta_box.validate()?;
        self.noise.validate()?;
        let d = &self.disturbance;
        if d.start > d.end || d.end > self.t_run {
            return Err(Error::InvalidParameter(format!(
                "disturbance interval [{}, {}] must satisfy 0 <= start <= end <= t_run = {}",
                d.start, d.end, self.t_run
            )));
        }
        if d.force.len() != 3 || !(d.noise_factor >= 0.0) {
            return Err(Error::InvalidParameter(
                "disturbance needs a non-negative noise factor and 3 force entries".into(),
            ));
        }
        if self.reference.len() != TRACKED_OUTPUTS {
            return Err(Error::InvalidParameter(format!(
                "reference needs {TRACKED_OUTPUTS} entries, got {}",
                self.reference.len()
            )));
        }
        if self.t_run == 0 || self.t_data == 0 {
            return Err(Error::InvalidParameter("t_run and t_data must be >= 1".into()));
        }
        for kind in ControllerKind::ALL {
            self.controller(kind).validate(3, TRACKED_OUTPUTS)?;
        }
        Ok(())
    }

    /// Hex digest of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }

    /// Persistent-excitation order required of the data record: the Hankel
    /// depth plus the number of unknown states.
    pub fn pe_order(&self, kind: ControllerKind) -> usize {
        self.controller(kind).depth() + 6 - crate::plant::KNOWN_STATES
    }
}

/// Parameters of the simulated plant for a seed.
pub fn true_params(cfg: &ExperimentConfig, seed: u64) -> Result<MsdParams> {
    if cfg.sample_true_theta {
        sample_theta_from(&cfg.plant.params, &cfg.theta_box, derive_seed(seed, "true-theta"))
    } else {
        Ok(cfg.plant.params)
    }
}

/// True plant model and the offline record for a seed.
pub fn offline_data(cfg: &ExperimentConfig, kind: ControllerKind, seed: u64) -> Result<(DiscreteLTI, CollectedData)> {
    let truth = cfg.plant.with_params(true_params(cfg, seed)?);
    let d = truth.discrete()?;
    let part = truth.partition()?;
    let data = collect_data(
        &d,
        &part,
        cfg.t_data,
        cfg.excitation_amplitude,
        &cfg.noise,
        derive_seed(seed, "data"),
        cfg.pe_order(kind),
    )?;
    Ok((d, data))
}

/// Builds the controller of `kind` from the offline record.
pub fn build_controller(
    cfg: &ExperimentConfig,
    kind: ControllerKind,
    truth: &DiscreteLTI,
    data: &CollectedData,
) -> Result<Controller> {
    let ccfg = cfg.controller(kind).clone();
    match kind {
        ControllerKind::Deepc => {
            let tracked: Vec<usize> = (0..TRACKED_OUTPUTS).collect();
            let y = data.y_d.select_channels(&tracked)?;
            let blocks = DataBlocks::new(&data.u_d, &y, ccfg.t_ini, ccfg.horizon)?;
            Controller::deepc(ccfg, blocks)
        }
        ControllerKind::Mdr => {
            let model = MdrModel::new(cfg.plant.clone(), cfg.theta_box)?;
            let blocks = DataBlocks::new(&data.u_d, &data.y_u_d, ccfg.t_ini, ccfg.horizon)?;
            let (w, v) = estimate_residuals(&model.nominal, &data.u_d, &data.y_d, &data.x_known_d)?;
            Controller::mdr(ccfg, model, blocks, w, v)
        }
        ControllerKind::Oracle => Controller::oracle(ccfg, truth.clone()),
    }
}

/// One closed-loop run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub controller: ControllerKind,
    pub seed: u64,
    pub config_digest: String,
    pub u: Signal,
    pub y: Signal,
    pub r: Signal,
    pub stage_cost: Vec<f64>,
    pub disturbed: Vec<bool>,
    /// Steps whose solve did not end optimal.
    pub fallbacks: usize,
    /// Steps that called the solver.
    pub solves: usize,
}

fn fmt_row(vals: impl Iterator<Item = f64>) -> String {
    vals.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunRecord {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// First disturbed step, or 0 without a disturbance.
    pub fn disturbance_start(&self) -> usize {
        self.disturbed.iter().position(|&d| d).unwrap_or(0)
    }

    /// Share of solver calls that fell back to the previous input.
    pub fn failure_rate(&self) -> f64 {
        if self.solves == 0 {
            0.0
        } else {
            self.fallbacks as f64 / self.solves as f64
        }
    }

    /// `step,u0..,y0..,r0..,stage_cost`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut head = vec!["step".to_string()];
        for (pre, dim) in [("u", self.u.dim()), ("y", self.y.dim()), ("r", self.r.dim())] {
            head.extend((0..dim).map(|c| format!("{pre}{c}")));
        }
        head.push("stage_cost".into());
        writeln!(w, "{}", head.join(","))?;
        for k in 0..self.len() {
            let vals = self.u.get(k).iter().chain(self.y.get(k).iter()).chain(self.r.get(k).iter()).cloned();
            writeln!(w, "{k},{},{}", fmt_row(vals), self.stage_cost[k])?;
        }
        Ok(())
    }

    /// Reads the CSV written by [`RunRecord::write_csv`]; the metadata
    /// fields are filled from the arguments.
    pub fn read_csv<R: Read>(
        r: R,
        controller: ControllerKind,
        seed: u64,
        disturbance: &Disturbance,
    ) -> Result<RunRecord> {
        let mut reader = csv::Reader::from_reader(r);
        let head = reader.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
        let count = |pre: char| head.iter().filter(|h| h.starts_with(pre) && h[1..].parse::<usize>().is_ok()).count();
        let (nu, ny, nr) = (count('u'), count('y'), count('r'));
        if head.len() != 2 + nu + ny + nr || nu == 0 || ny == 0 || nr == 0 {
            return Err(Error::Parse("unexpected run CSV header".into()));
        }
        let (mut u, mut y, mut rr, mut cost) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("'{s}': {e}"))))
                .collect::<Result<_>>()?;
            u.push(DVector::from_column_slice(&vals[1..1 + nu]));
            y.push(DVector::from_column_slice(&vals[1 + nu..1 + nu + ny]));
            rr.push(DVector::from_column_slice(&vals[1 + nu + ny..1 + nu + ny + nr]));
            cost.push(vals[1 + nu + ny + nr]);
        }
        let n = cost.len();
        Ok(RunRecord {
            controller,
            seed,
            config_digest: String::new(),
            u: Signal::new(u)?,
            y: Signal::new(y)?,
            r: Signal::new(rr)?,
            stage_cost: cost,
            disturbed: (0..n).map(|k| disturbance.active(k)).collect(),
            fallbacks: 0,
            solves: 0,
        })
    }
}

/// `||y - r||_Q^2 + ||u||_R^2`.
pub fn stage_cost(y: &DVector<f64>, r: &DVector<f64>, u: &DVector<f64>, q: &DMatrix<f64>, rw: &DMatrix<f64>) -> f64 {
    let e = y - r;
    e.dot(&(q * &e)) + u.dot(&(rw * u))
}

/// Runs the offline phase and `t_run` closed-loop steps.
///
/// The plant noise stream depends only on the seed, so different controllers
/// see the same noise draws.
pub fn run_experiment(cfg: &ExperimentConfig, kind: ControllerKind, seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    let (truth, data) = offline_data(cfg, kind, seed)?;
    let mut ctrl = build_controller(cfg, kind, &truth, &data)?;
    let ccfg = cfg.controller(kind);
    let q = ccfg.q_matrix()?;
    let rw = ccfg.r_matrix()?;
    let horizon = ccfg.horizon;
    let m = truth.n_inputs();
    let reference = DVector::from_column_slice(&cfg.reference);
    let r_window = Signal::new(vec![reference.clone(); horizon])?;
    let mut sim = PlantSim::new(truth.clone(), DVector::zeros(truth.n_states()), derive_seed(seed, "closed-loop"))?;
    let force = DVector::from_column_slice(&cfg.disturbance.force);
    let step_seed = derive_seed(seed, "scenarios");

    let (mut us, mut ys, mut rs) = (Vec::new(), Vec::new(), Vec::new());
    let mut costs = Vec::with_capacity(cfg.t_run);
    let mut disturbed = Vec::with_capacity(cfg.t_run);
    let (mut fallbacks, mut solves) = (0, 0);
    for k in 0..cfg.t_run {
        let active = cfg.disturbance.active(k);
        let noise = if active { cfg.noise.scaled(cfg.disturbance.noise_factor) } else { cfg.noise };
        let y = sim.measure(&DVector::zeros(m), noise.sigma_v);
        let state = sim.x.clone();
        let step: ControlStep = ctrl.receding_step(&y, &state, &r_window, step_seed.wrapping_add(k as u64))?;
        if step.solver_status.is_some() || step.fallback {
            solves += 1;
        }
        if step.fallback {
            fallbacks += 1;
        }
        let mut u_plant = step.u_applied.clone();
        if active {
            u_plant += &force;
        }
        sim.advance(&u_plant, noise.sigma_w);
        let y_tr = y.rows(0, TRACKED_OUTPUTS).into_owned();
        costs.push(stage_cost(&y_tr, &reference, &step.u_applied, &q, &rw));
        us.push(step.u_applied);
        ys.push(y_tr);
        rs.push(reference.clone());
        disturbed.push(active);
    }
    log::info!("{kind} seed {seed}: {fallbacks} fallbacks in {solves} solves");
    Ok(RunRecord {
        controller: kind,
        seed,
        config_digest: cfg.digest(),
        u: Signal::new(us)?,
        y: Signal::new(ys)?,
        r: Signal::new(rs)?,
        stage_cost: costs,
        disturbed,
        fallbacks,
        solves,
    })
}

/// `sum_k ||y_k - r_k||_Q^2 + ||u_k||_R^2`.
pub fn total_cost(rec: &RunRecord, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    (0..rec.len()).map(|k| stage_cost(rec.y.get(k), rec.r.get(k), rec.u.get(k), q, r)).sum()
}

/// Largest `|y - r|` over steps and channels.
pub fn max_output_deviation(rec: &RunRecord) -> f64 {
    (0..rec.len()).map(|k| (rec.y.get(k) - rec.r.get(k)).amax()).fold(0.0, f64::max)
}

/// First step from which every later error stays within
/// `band_fraction * max(|r|, 1e-6)` on all channels; the record length if the
/// last sample is outside the band.
pub fn settling_time(rec: &RunRecord, band_fraction: f64) -> usize {
    let inside = |k: usize| {
        let (y, r) = (rec.y.get(k), rec.r.get(k));
        (0..y.len()).all(|c| (y[c] - r[c]).abs() <= band_fraction * r[c].abs().max(1e-6))
    };
    let mut settled = rec.len();
    for k in (0..rec.len()).rev() {
        if !inside(k) {
            break;
        }
        settled = k;
    }
    settled
}

/// Largest per-channel range of `y` from the disturbance start onward.
pub fn peak_to_peak(rec: &RunRecord) -> f64 {
    let start = rec.disturbance_start();
    (0..rec.y.dim())
        .map(|c| {
            let vals = (start..rec.len()).map(|k| rec.y.get(k)[c]);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi >= lo {
                hi - lo
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// `100 (base - new) / base`.
pub fn improvement(base: f64, new: f64) -> Result<f64> {
    if !(base > 0.0) {
        return Err(Error::NonPositiveBase(base));
    }
    Ok(100.0 * (base - new) / base)
}

/// Rounds a percentage to two decimals, as printed in reports.
pub fn round_pct(p: f64) -> f64 {
    (p * 100.0).round() / 100.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub total_cost: f64,
    pub max_output_deviation: f64,
    pub settling_time_steps: usize,
    pub peak_to_peak: f64,
}

impl MetricsReport {
    pub fn compute(rec: &RunRecord, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Self {
        Self {
            total_cost: total_cost(rec, q, r),
            max_output_deviation: max_output_deviation(rec),
            settling_time_steps: settling_time(rec, 0.05),
            peak_to_peak: peak_to_peak(rec),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementPct {
    pub total_cost: Option<f64>,
    pub max_output_deviation: Option<f64>,
    pub settling_time_steps: Option<f64>,
    pub peak_to_peak: Option<f64>,
}

/// Two metric reports side by side; improvements are of `new` over `base`
/// and `None` where the base value is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub base: MetricsReport,
    pub new: MetricsReport,
    pub improvement_pct: ImprovementPct,
}

pub fn compare(base: &MetricsReport, new: &MetricsReport) -> Comparison {
    let imp = |a: f64, b: f64| improvement(a, b).ok().map(round_pct);
    Comparison {
        base: *base,
        new: *new,
        improvement_pct: ImprovementPct {
            total_cost: imp(base.total_cost, new.total_cost),
            max_output_deviation: imp(base.max_output_deviation, new.max_output_deviation),
            settling_time_steps: imp(base.settling_time_steps as f64, new.settling_time_steps as f64),
            peak_to_peak: imp(base.peak_to_peak, new.peak_to_peak),
        },
    }
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(vals: &[f64]) -> f64 {
    let mut v = vals.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
