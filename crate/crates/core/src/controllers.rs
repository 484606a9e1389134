//! Standard DeePC, MDR-DeePC and an exact-model MPC oracle, plus the
//! receding-horizon driver.
//!
//! All three builders use the same condensed decision layout. The data-driven
//! coefficient vector is parametrized as `g = B^+ [u_ini; u] + N h`, where
//! `B = [Up; Uf]` has full row rank and `N` spans its null space, so the input
//! rows of the Hankel constraint hold exactly and `h` is free. The decision
//! vector is `z = (u, h_1, .., h_M)`; predicted outputs, the initial-condition
//! slack `sigma = Yp g - y_ini` and the known-state rollout are affine in `z`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ambiguity::{draw_scenarios_from, estimate_residuals, update_dist, AmbiguitySpec, EmpiricalDist, Scenario};
use crate::error::{Error, Result};
use crate::linalg::{kron_eye, range_null};
use crate::plant::{DiscreteLTI, HybridPartition, MsdParams, MsdPlant, ThetaBox, KNOWN_OUTPUTS, TRACKED_OUTPUTS};
use crate::qpcore::{solve_with, ConvexProblem, QuadCost, SolveStatus, SolverOptions};
use crate::trajkit::{build_hankel, split_past_future, Signal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Deepc,
    Mdr,
    Oracle,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Deepc, ControllerKind::Mdr, ControllerKind::Oracle];

    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Deepc => "deepc",
            ControllerKind::Mdr => "mdr",
            ControllerKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deepc" => Ok(ControllerKind::Deepc),
            "mdr" => Ok(ControllerKind::Mdr),
            "oracle" => Ok(ControllerKind::Oracle),
            other => Err(Error::Parse(format!("unknown controller '{other}' (expected deepc, mdr or oracle)"))),
        }
    }
}

/// Constraint on the known positions at the end of the horizon.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalMode {
    #[default]
    None,
    BoxAroundReference {
        radius: f64,
    },
}

fn default_integral_gain() -> f64 {
    0.1
}

fn default_window() -> usize {
    150
}

fn default_solver_tol() -> f64 {
    crate::qpcore::DEFAULT_TOL
}

/// Tuning shared by the three controllers. `q` weighs the tracked outputs
/// (the three positions), `r` the inputs; both are given row by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub t_ini: usize,
    pub horizon: usize,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub lambda_g: f64,
    pub lambda_y: f64,
    /// Replaces the slack on the initial-condition rows by the equality
    /// `Yp g = y_ini` (only sensible for noiseless data).
    #[serde(default)]
    pub hard_initial_condition: bool,
    /// Per input channel `[lo, hi]`.
    #[serde(default)]
    pub u_bounds: Option<Vec<[f64; 2]>>,
    /// Per tracked output channel `[lo, hi]`.
    #[serde(default)]
    pub y_bounds: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub terminal: TerminalMode,
    /// Scenario count `M` (MDR only).
    pub scenarios: usize,
    /// Wasserstein radius of the process-noise ball.
    pub eps_w: f64,
    /// Wasserstein radius of the measurement-noise ball.
    pub eps_v: f64,
    /// Online update of the noise centers from new residuals.
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default = "default_window")]
    pub ambiguity_window: usize,
    /// Adds `integral_gain` times the running output error to the reference.
    #[serde(default)]
    pub integral_action: bool,
    #[serde(default = "default_integral_gain")]
    pub integral_gain: f64,
    #[serde(default = "default_solver_tol")]
    pub solver_tol: f64,
}

fn diag(n: usize, v: f64) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { v } else { 0.0 }).collect()).collect()
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            t_ini: 4,
            horizon: 20,
            q: diag(TRACKED_OUTPUTS, 10.0),
            r: diag(3, 1e-5),
            lambda_g: 1e-4,
            lambda_y: 1e3,
            hard_initial_condition: false,
            u_bounds: None,
            y_bounds: None,
            terminal: TerminalMode::None,
            scenarios: 5,
            eps_w: 0.05,
            eps_v: 0.005,
            adaptive: false,
            ambiguity_window: default_window(),
            integral_action: false,
            integral_gain: default_integral_gain(),
            solver_tol: default_solver_tol(),
        }
    }
}

fn square(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidParameter(format!("{name} must be a non-empty square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn check_pd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::InvalidParameter(format!("{name} must be symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::InvalidParameter(format!("{name} must be positive definite")));
    }
    Ok(())
}

fn check_boxes(b: &Option<Vec<[f64; 2]>>, len: usize, name: &str) -> Result<()> {
    if let Some(b) = b {
        if b.len() != len {
            return Err(Error::InvalidParameter(format!("{name} needs {len} entries, got {}", b.len())));
        }
        if b.iter().any(|[lo, hi]| lo.is_nan() || hi.is_nan() || lo > hi) {
            return Err(Error::InvalidParameter(format!("{name} has an empty interval")));
        }
    }
    Ok(())
}

impl ControllerConfig {
    pub fn q_matrix(&self) -> Result<DMatrix<f64>> {
        square(&self.q, "Q")
    }

    pub fn r_matrix(&self) -> Result<DMatrix<f64>> {
        square(&self.r, "R")
    }

    /// Hankel depth `T_ini + N`.
    pub fn depth(&self) -> usize {
        self.t_ini + self.horizon
    }

    /// Checks the invariants for `m` inputs and `p` tracked outputs.
    pub fn validate(&self, m: usize, p: usize) -> Result<()> {
        let q = self.q_matrix()?;
        let r = self.r_matrix()?;
        if q.nrows() != p || r.nrows() != m {
            return Err(Error::InvalidParameter(format!(
                "Q is {}x{} and R is {}x{}, expected {p}x{p} and {m}x{m}",
                q.nrows(),
                q.nrows(),
                r.nrows(),
                r.nrows()
            )));
        }
        check_pd(&q, "Q")?;
        check_pd(&r, "R")?;
        if self.t_ini == 0 || self.horizon == 0 || self.scenarios == 0 {
            return Err(Error::InvalidParameter("t_ini, horizon and scenarios must be >= 1".into()));
        }
        let nonneg = [
            ("lambda_g", self.lambda_g),
            ("lambda_y", self.lambda_y),
            ("eps_w", self.eps_w),
            ("eps_v", self.eps_v),
            ("integral_gain", self.integral_gain),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.solver_tol > 0.0) {
            return Err(Error::InvalidParameter("solver_tol must be > 0".into()));
        }
        if let TerminalMode::BoxAroundReference { radius } = self.terminal {
            if !(radius >= 0.0) {
                return Err(Error::InvalidParameter("terminal radius must be >= 0".into()));
            }
        }
        check_boxes(&self.u_bounds, m, "u_bounds")?;
        check_boxes(&self.y_bounds, p, "y_bounds")?;
        Ok(())
    }
}

/// Hankel row blocks of one data record at depth `T_ini + N`, together with
/// the condensation `g = pinv_ini u_ini + pinv_f u + null h`.
#[derive(Clone, Debug)]
pub struct DataBlocks {
    pub up: DMatrix<f64>,
    pub uf: DMatrix<f64>,
    pub yp: DMatrix<f64>,
    pub yf: DMatrix<f64>,
    pub t_ini: usize,
    pub horizon: usize,
    pinv_ini: DMatrix<f64>,
    pinv_f: DMatrix<f64>,
    null: DMatrix<f64>,
}

impl DataBlocks {
    pub fn new(u_d: &Signal, y_d: &Signal, t_ini: usize, horizon: usize) -> Result<Self> {
        if u_d.len() != y_d.len() {
            return Err(Error::DimensionMismatch(format!(
                "input record has {} samples, output record {}",
                u_d.len(),
                y_d.len()
            )));
        }
        let depth = t_ini + horizon;
        let hu = build_hankel(u_d, depth)?;
        let hy = build_hankel(y_d, depth)?;
        let (up, uf) = split_past_future(&hu, t_ini, horizon)?;
        let (yp, yf) = split_past_future(&hy, t_ini, horizon)?;
        let rows = up.nrows() + uf.nrows();
        let mut b = DMatrix::zeros(rows, up.ncols());
        b.rows_mut(0, up.nrows()).copy_from(&up);
        b.rows_mut(up.nrows(), uf.nrows()).copy_from(&uf);
        let rn = range_null(&b);
        if rn.rank < rows {
            return Err(Error::ExcitationFailed { order: depth });
        }
        let pinv_ini = rn.pinv.columns(0, up.nrows()).into_owned();
        let pinv_f = rn.pinv.columns(up.nrows(), uf.nrows()).into_owned();
        Ok(Self { up, uf, yp, yf, t_ini, horizon, pinv_ini, pinv_f, null: rn.null })
    }

    /// Number of Hankel columns, `T - L + 1`.
    pub fn g_dim(&self) -> usize {
        self.up.ncols()
    }

    pub fn n_inputs(&self) -> usize {
        self.up.nrows() / self.t_ini
    }

    pub fn n_outputs(&self) -> usize {
        self.yp.nrows() / self.t_ini
    }

    /// Dimension of the free part `h` of `g`.
    pub fn free_dim(&self) -> usize {
        self.null.ncols()
    }

    /// `g` for given `u_ini`, future inputs and free part.
    pub fn coefficients(&self, u_ini: &DVector<f64>, u: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
        &self.pinv_ini * u_ini + &self.pinv_f * u + &self.null * h
    }
}

/// The last `T_ini` applied inputs and measured outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct IoBuffers {
    t_ini: usize,
    u: VecDeque<DVector<f64>>,
    y: VecDeque<DVector<f64>>,
}

impl IoBuffers {
    pub fn new(t_ini: usize) -> Self {
        Self { t_ini, u: VecDeque::new(), y: VecDeque::new() }
    }

    pub fn t_ini(&self) -> usize {
        self.t_ini
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn is_warm(&self) -> bool {
        self.u.len() == self.t_ini
    }

    pub fn push(&mut self, u: DVector<f64>, y: DVector<f64>) {
        self.u.push_back(u);
        self.y.push_back(y);
        while self.u.len() > self.t_ini {
            self.u.pop_front();
            self.y.pop_front();
        }
    }

    pub fn inputs(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.u.iter()
    }

    pub fn outputs(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.y.iter()
    }

    fn ensure_warm(&self) -> Result<()> {
        if self.is_warm() {
            Ok(())
        } else {
            Err(Error::BuffersNotWarm { have: self.len(), need: self.t_ini })
        }
    }

    /// Stacked `u_ini`, oldest first.
    pub fn u_ini(&self) -> DVector<f64> {
        stack(self.u.iter().cloned())
    }

    /// Stacked `y_ini` restricted to `channels`, oldest first.
    pub fn y_ini(&self, channels: &[usize]) -> DVector<f64> {
        stack(self.y.iter().map(|v| DVector::from_iterator(channels.len(), channels.iter().map(|&c| v[c]))))
    }
}

fn stack(parts: impl Iterator<Item = DVector<f64>>) -> DVector<f64> {
    let all: Vec<f64> = parts.flat_map(|v| v.iter().cloned().collect::<Vec<_>>()).collect();
    DVector::from_vec(all)
}

/// Known-subsystem matrices for one parameter value.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBlocks {
    pub a_k: DMatrix<f64>,
    pub a_y: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    pub c_k: DMatrix<f64>,
    pub d_k: DMatrix<f64>,
}

impl ModelBlocks {
    fn from_partition(part: &HybridPartition) -> Self {
        Self {
            a_k: part.a_k.clone(),
            a_y: part.coupling_matrix(),
            b_k: part.b_k.clone(),
            c_k: part.c_k.clone(),
            d_k: part.d_k.clone(),
        }
    }
}

/// Nominal hybrid model plus the parameter box of the uncertain coupling.
#[derive(Clone, Debug)]
pub struct MdrModel {
    pub plant: MsdPlant,
    pub nominal: HybridPartition,
    pub a_y: DMatrix<f64>,
    pub theta_box: ThetaBox,
}

impl MdrModel {
    pub fn new(plant: MsdPlant, theta_box: ThetaBox) -> Result<Self> {
        theta_box.validate()?;
        let nominal = plant.partition()?;
        let a_y = nominal.coupling_matrix();
        Ok(Self { plant, nominal, a_y, theta_box })
    }

    pub fn nominal_blocks(&self) -> ModelBlocks {
        ModelBlocks::from_partition(&self.nominal)
    }

    /// Rebuilds the known-subsystem blocks for the parameters `theta`.
    pub fn remap(&self, theta: &MsdParams) -> Result<ModelBlocks> {
        let part = self.plant.with_params(*theta).partition()?;
        Ok(ModelBlocks::from_partition(&part))
    }
}

/// Terminal constraint on the known positions: `|pos - target| <= half_width`.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalSet {
    pub target: DVector<f64>,
    pub half_width: f64,
}

/// Linear rows produced by a terminal set.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalRows {
    pub eq: Option<(DMatrix<f64>, DVector<f64>)>,
    pub ineq: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl TerminalSet {
    /// Rows for positions given as `map z + offset`. A zero half-width gives
    /// equalities, anything else a two-sided box.
    pub fn rows(&self, map: &DMatrix<f64>, offset: &DVector<f64>) -> TerminalRows {
        let rhs = &self.target - offset;
        if self.half_width == 0.0 {
            return TerminalRows { eq: Some((map.clone(), rhs)), ineq: None };
        }
        let k = map.nrows();
        let mut g = DMatrix::zeros(2 * k, map.ncols());
        g.rows_mut(0, k).copy_from(map);
        g.rows_mut(k, k).copy_from(&(-map));
        let mut h = DVector::zeros(2 * k);
        h.rows_mut(0, k).copy_from(&rhs.add_scalar(self.half_width));
        h.rows_mut(k, k).copy_from(&(-rhs).add_scalar(self.half_width));
        TerminalRows { eq: None, ineq: Some((g, h)) }
    }
}

/// `None` when the mode is `None`; otherwise a box of radius `ρ` around the
/// known-position entries of `r_terminal`.
pub fn terminal_set(cfg: &ControllerConfig, r_terminal: &DVector<f64>) -> Option<TerminalSet> {
    match cfg.terminal {
        TerminalMode::None => None,
        TerminalMode::BoxAroundReference { radius } => {
            let k = KNOWN_OUTPUTS.min(r_terminal.len());
            Some(TerminalSet { target: r_terminal.rows(0, k).into_owned(), half_width: radius })
        }
    }
}

/// A built problem and what is needed to read its solution.
#[derive(Clone, Debug)]
pub struct Formulation {
    pub problem: ConvexProblem,
    /// Per cost, the affine map `z -> (y_0, .., y_{N-1})` of tracked outputs.
    pub outputs: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub n_inputs: usize,
    pub horizon: usize,
}

impl Formulation {
    pub fn first_input(&self, z: &DVector<f64>) -> DVector<f64> {
        z.rows(0, self.n_inputs).into_owned()
    }

    pub fn inputs(&self, z: &DVector<f64>) -> Signal {
        let m = self.n_inputs;
        Signal::new((0..self.horizon).map(|t| z.rows(t * m, m).into_owned()).collect()).expect("horizon >= 1")
    }

    pub fn predicted_outputs(&self, z: &DVector<f64>, scenario: usize) -> Signal {
        let (map, off) = &self.outputs[scenario];
        let y = map * z + off;
        let p = y.len() / self.horizon;
        Signal::new((0..self.horizon).map(|t| y.rows(t * p, p).into_owned()).collect()).expect("horizon >= 1")
    }
}

/// Accumulates `(F v + f)' W (F v + f)` into `(P, q, r0)`; `w = None` means
/// the identity, and the whole term is multiplied by `scale`.
fn add_term(
    acc: &mut (DMatrix<f64>, DVector<f64>, f64),
    f_map: &DMatrix<f64>,
    f_off: &DVector<f64>,
    w: Option<&DMatrix<f64>>,
    scale: f64,
) {
    if scale == 0.0 {
        return;
    }
    let wf = match w {
        Some(w) => w * f_map,
        None => f_map.clone(),
    };
    let wo = match w {
        Some(w) => w * f_off,
        None => f_off.clone(),
    };
    acc.0 += f_map.tr_mul(&wf) * scale;
    acc.1 += wf.tr_mul(f_off) * (2.0 * scale);
    acc.2 += f_off.dot(&wo) * scale;
}

fn reference_stack(r: &Signal, horizon: usize, p: usize) -> Result<DVector<f64>> {
    if r.len() < horizon || r.dim() != p {
        return Err(Error::DimensionMismatch(format!(
            "reference has {} samples of dimension {}, need {horizon} of dimension {p}",
            r.len(),
            r.dim()
        )));
    }
    Ok(r.stacked(0, horizon))
}

fn apply_u_bounds(prob: &mut ConvexProblem, cfg: &ControllerConfig, m: usize) -> Result<()> {
    if let Some(b) = &cfg.u_bounds {
        for t in 0..cfg.horizon {
            for (c, [lo, hi]) in b.iter().enumerate().take(m) {
                prob.bound(t * m + c, *lo, *hi)?;
            }
        }
    }
    Ok(())
}

/// `lo <= map z + off <= hi` per tracked channel and step.
fn apply_y_bounds(
    prob: &mut ConvexProblem,
    cfg: &ControllerConfig,
    map: &DMatrix<f64>,
    off: &DVector<f64>,
    p: usize,
) -> Result<()> {
    let Some(b) = &cfg.y_bounds else { return Ok(()) };
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for k in 0..map.nrows() {
        let [lo, hi] = b[k % p];
        let row = map.row(k).transpose();
        if hi.is_finite() {
            rows.push((row.clone(), hi - off[k]));
        }
        if lo.is_finite() {
            rows.push((-row, off[k] - lo));
        }
    }
    if rows.is_empty() {
        return Ok(());
    }
    let g = DMatrix::from_fn(rows.len(), map.ncols(), |i, j| rows[i].0[j]);
    let h = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    prob.add_inequalities(&g, &h)
}

fn apply_terminal(
    prob: &mut ConvexProblem,
    set: &Option<TerminalSet>,
    map: &DMatrix<f64>,
    off: &DVector<f64>,
) -> Result<()> {
    let Some(set) = set else { return Ok(()) };
    let rows = set.rows(map, off);
    if let Some((e, f)) = rows.eq {
        prob.add_equalities(&e, &f)?;
    }
    if let Some((g, h)) = rows.ineq {
        prob.add_inequalities(&g, &h)?;
    }
    Ok(())
}

/// Scenario-independent pieces of the condensed data constraint in local
/// coordinates `v = (u, h)`.
struct Condensed {
    nu: usize,
    nh: usize,
    y_map: DMatrix<f64>,
    y_off: DVector<f64>,
    /// `Yp g - y_ini` as an affine map of `v`.
    s_map: DMatrix<f64>,
    s_off: DVector<f64>,
    hard: bool,
    /// `(P, q, r0)` of `||u||_R^2 + lambda_g ||g||^2 + lambda_y ||sigma||^2`.
    base: (DMatrix<f64>, DVector<f64>, f64),
}

fn condense(
    blocks: &DataBlocks,
    cfg: &ControllerConfig,
    u_ini: &DVector<f64>,
    y_ini: &DVector<f64>,
) -> Result<Condensed> {
    let m = blocks.n_inputs();
    let nu = cfg.horizon * m;
    let nh = blocks.free_dim();
    let nl = nu + nh;
    let mut g_map = DMatrix::zeros(blocks.g_dim(), nl);
    g_map.columns_mut(0, nu).copy_from(&blocks.pinv_f);
    g_map.columns_mut(nu, nh).copy_from(&blocks.null);
    let g_off = &blocks.pinv_ini * u_ini;
    let y_map = &blocks.yf * &g_map;
    let y_off = &blocks.yf * &g_off;
    let s_map = &blocks.yp * &g_map;
    let s_off = &blocks.yp * &g_off - y_ini;

    let mut base = (DMatrix::zeros(nl, nl), DVector::zeros(nl), 0.0);
    let wr = kron_eye(cfg.horizon, &cfg.r_matrix()?);
    base.0.view_mut((0, 0), (nu, nu)).copy_from(&wr);
    add_term(&mut base, &g_map, &g_off, None, cfg.lambda_g);
    if !cfg.hard_initial_condition {
        add_term(&mut base, &s_map, &s_off, None, cfg.lambda_y);
    }
    Ok(Condensed { nu, nh, y_map, y_off, s_map, s_off, hard: cfg.hard_initial_condition, base })
}

impl Condensed {
    /// Adds `Yp g_i = y_ini` for free block `i` when the slack is disabled.
    fn add_initial_rows(&self, prob: &mut ConvexProblem, block: usize, count: usize) -> Result<()> {
        if self.hard {
            prob.add_equalities(&self.embed_cols(&self.s_map, block, count), &(-&self.s_off))?;
        }
        Ok(())
    }

    /// Column `l` of the local layout in a problem with `count` free blocks.
    fn embed_cols(&self, local: &DMatrix<f64>, block: usize, count: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(local.nrows(), self.nu + count * self.nh);
        out.columns_mut(0, self.nu).copy_from(&local.columns(0, self.nu));
        out.columns_mut(self.nu + block * self.nh, self.nh).copy_from(&local.columns(self.nu, self.nh));
        out
    }

    fn embed_cost(&self, c: &(DMatrix<f64>, DVector<f64>, f64), block: usize, count: usize) -> Result<QuadCost> {
        let (nu, nh) = (self.nu, self.nh);
        let n = nu + count * nh;
        let off = nu + block * nh;
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (nu, nu)).copy_from(&c.0.view((0, 0), (nu, nu)));
        p.view_mut((0, off), (nu, nh)).copy_from(&c.0.view((0, nu), (nu, nh)));
        p.view_mut((off, 0), (nh, nu)).copy_from(&c.0.view((nu, 0), (nh, nu)));
        p.view_mut((off, off), (nh, nh)).copy_from(&c.0.view((nu, nu), (nh, nh)));
        let mut q = DVector::zeros(n);
        q.rows_mut(0, nu).copy_from(&c.1.rows(0, nu));
        q.rows_mut(off, nh).copy_from(&c.1.rows(nu, nh));
        QuadCost::from_gram(p, q, c.2)
    }
}

/// Standard DeePC: the Hankel blocks describe all tracked outputs.
pub fn build_deepc(blocks: &DataBlocks, cfg: &ControllerConfig, buf: &IoBuffers, r: &Signal) -> Result<Formulation> {
    buf.ensure_warm()?;
    let m = blocks.n_inputs();
    let p = blocks.n_outputs();
    cfg.validate(m, p)?;
    check_blocks(blocks, cfg)?;
    let channels: Vec<usize> = (0..p).collect();
    let cond = condense(blocks, cfg, &buf.u_ini(), &buf.y_ini(&channels))?;
    let r_stack = reference_stack(r, cfg.horizon, p)?;
    let wq = kron_eye(cfg.horizon, &cfg.q_matrix()?);
    let mut cost = cond.base.clone();
    add_term(&mut cost, &cond.y_map, &(&cond.y_off - &r_stack), Some(&wq), 1.0);

    let mut prob = ConvexProblem::new(cond.nu + cond.nh);
    prob.add_cost(cond.embed_cost(&cost, 0, 1)?)?;
    cond.add_initial_rows(&mut prob, 0, 1)?;
    apply_u_bounds(&mut prob, cfg, m)?;
    apply_y_bounds(&mut prob, cfg, &cond.y_map, &cond.y_off, p)?;
    let set = terminal_set(cfg, r.get(cfg.horizon - 1));
    if let Some(s) = &set {
        // Last predicted known positions stand in for the state at k+N.
        let k = s.target.len();
        let rows: Vec<usize> = (0..k).map(|c| (cfg.horizon - 1) * p + c).collect();
        let map = cond.y_map.select_rows(rows.iter());
        let off = cond.y_off.select_rows(rows.iter());
        apply_terminal(&mut prob, &set, &map, &off)?;
    }
    Ok(Formulation { problem: prob, outputs: vec![(cond.y_map, cond.y_off)], n_inputs: m, horizon: cfg.horizon })
}

fn check_blocks(blocks: &DataBlocks, cfg: &ControllerConfig) -> Result<()> {
    if blocks.t_ini != cfg.t_ini || blocks.horizon != cfg.horizon {
        return Err(Error::DepthMismatch { depth: blocks.t_ini + blocks.horizon, expected: cfg.depth() });
    }
    Ok(())
}

/// MDR-DeePC scenario program: shared inputs, one free data block and one
/// epigraph cost per scenario.
#[allow(clippy::too_many_arguments)]
pub fn build_mdr(
    model: &MdrModel,
    blocks: &DataBlocks,
    cfg: &ControllerConfig,
    x_known: &DVector<f64>,
    buf: &IoBuffers,
    scenarios: &[Scenario],
    r: &Signal,
) -> Result<Formulation> {
    buf.ensure_warm()?;
    let part = &model.nominal;
    let m = blocks.n_inputs();
    let pt = cfg.q.len();
    cfg.validate(m, pt)?;
    check_blocks(blocks, cfg)?;
    if scenarios.len() != cfg.scenarios {
        return Err(Error::ScenarioCountMismatch { expected: cfg.scenarios, got: scenarios.len() });
    }
    let (nk, pk, pu) = (part.n_k, part.p_k, part.p_u);
    if blocks.n_outputs() != pu || x_known.len() != nk || pt > pk + pu || pt < pk {
        return Err(Error::DimensionMismatch(format!(
            "data blocks carry {} outputs and the known state has {}, model expects {pu} and {nk}",
            blocks.n_outputs(),
            x_known.len()
        )));
    }
    let n = cfg.horizon;
    for s in scenarios {
        if s.horizon() < n || s.w_path.dim() != nk || s.v_path.len() < n || s.v_path.dim() < pt {
            return Err(Error::DimensionMismatch("scenario paths do not cover the horizon".into()));
        }
    }
    let unknown: Vec<usize> = (pk..pk + pu).collect();
    let cond = condense(blocks, cfg, &buf.u_ini(), &buf.y_ini(&unknown))?;
    let r_stack = reference_stack(r, n, pt)?;
    let wq = kron_eye(n, &cfg.q_matrix()?);
    let count = scenarios.len();
    let nl = cond.nu + cond.nh;
    let mut prob = ConvexProblem::new(cond.nu + count * cond.nh);
    let set = terminal_set(cfg, r.get(n - 1));
    let mut outputs = Vec::with_capacity(count);

    for (i, s) in scenarios.iter().enumerate() {
        let mb = model.remap(&s.theta)?;
        let mut xm = DMatrix::zeros(nk, nl);
        let mut xo = x_known.clone();
        let mut ym = DMatrix::zeros(n * pt, nl);
        let mut yo = DVector::zeros(n * pt);
        for t in 0..n {
            let ck_m = &mb.c_k * &xm;
            let ck_o = &mb.c_k * &xo;
            let v = s.v_path.get(t);
            for c in 0..pt {
                let row = t * pt + c;
                if c < pk {
                    ym.row_mut(row).copy_from(&ck_m.row(c));
                    for j in 0..m {
                        ym[(row, t * m + j)] += mb.d_k[(c, j)];
                    }
                    yo[row] = ck_o[c] + v[c];
                } else {
                    let src = t * pu + (c - pk);
                    ym.row_mut(row).copy_from(&cond.y_map.row(src));
                    yo[row] = cond.y_off[src] + v[c];
                }
            }
            let yu_m = cond.y_map.rows(t * pu, pu);
            let yu_o = cond.y_off.rows(t * pu, pu);
            let mut next = &mb.a_k * &xm + &mb.a_y * yu_m;
            let mut bcols = next.columns_mut(t * m, m);
            bcols += &mb.b_k;
            xo = &mb.a_k * &xo + &mb.a_y * yu_o + s.w_path.get(t);
            xm = next;
        }
        let mut cost = cond.base.clone();
        add_term(&mut cost, &ym, &(&yo - &r_stack), Some(&wq), 1.0);
        prob.add_cost(cond.embed_cost(&cost, i, count)?)?;
        cond.add_initial_rows(&mut prob, i, count)?;

        let ym_full = cond.embed_cols(&ym, i, count);
        apply_y_bounds(&mut prob, cfg, &ym_full, &yo, pt)?;
        if set.is_some() {
            let k = set.as_ref().map(|s| s.target.len()).unwrap_or(0);
            let map = cond.embed_cols(&(mb.c_k.rows(0, k) * &xm), i, count);
            let off = mb.c_k.rows(0, k) * &xo;
            apply_terminal(&mut prob, &set, &map, &off)?;
        }
        outputs.push((ym_full, yo));
    }
    apply_u_bounds(&mut prob, cfg, m)?;
    Ok(Formulation { problem: prob, outputs, n_inputs: m, horizon: n })
}

/// Condensed finite-horizon tracking problem on the exact model; tracks the
/// first `Q.nrows()` outputs.
pub fn build_mpc_oracle(
    truth: &DiscreteLTI,
    cfg: &ControllerConfig,
    x: &DVector<f64>,
    r: &Signal,
) -> Result<Formulation> {
    let m = truth.n_inputs();
    let nx = truth.n_states();
    let pt = cfg.q.len();
    cfg.validate(m, pt)?;
    if pt > truth.n_outputs() || x.len() != nx {
        return Err(Error::DimensionMismatch(format!(
            "oracle tracks {pt} of {} outputs from a state of dimension {} (model has {nx})",
            truth.n_outputs(),
            x.len()
        )));
    }
    let n = cfg.horizon;
    let nu = n * m;
    let c = truth.cd.rows(0, pt).into_owned();
    let d = truth.dd.rows(0, pt).into_owned();
    let mut xm = DMatrix::zeros(nx, nu);
    let mut xo = x.clone();
    let mut ym = DMatrix::zeros(n * pt, nu);
    let mut yo = DVector::zeros(n * pt);
    for t in 0..n {
        ym.rows_mut(t * pt, pt).copy_from(&(&c * &xm));
        let mut du = ym.view_mut((t * pt, t * m), (pt, m));
        du += &d;
        yo.rows_mut(t * pt, pt).copy_from(&(&c * &xo));
        let mut next = &truth.ad * &xm;
        let mut bcols = next.columns_mut(t * m, m);
        bcols += &truth.bd;
        xm = next;
        xo = &truth.ad * &xo;
    }
    let r_stack = reference_stack(r, n, pt)?;
    let wq = kron_eye(n, &cfg.q_matrix()?);
    let mut cost = (kron_eye(n, &cfg.r_matrix()?), DVector::zeros(nu), 0.0);
    add_term(&mut cost, &ym, &(&yo - &r_stack), Some(&wq), 1.0);
    let mut prob = ConvexProblem::new(nu);
    prob.add_cost(QuadCost::from_gram(cost.0, cost.1, cost.2)?)?;
    apply_u_bounds(&mut prob, cfg, m)?;
    apply_y_bounds(&mut prob, cfg, &ym, &yo, pt)?;
    let set = terminal_set(cfg, r.get(n - 1));
    if let Some(s) = &set {
        let k = s.target.len();
        let ck = truth.cd.rows(0, k);
        apply_terminal(&mut prob, &set, &(ck * &xm), &(ck * &xo))?;
    }
    Ok(Formulation { problem: prob, outputs: vec![(ym, yo)], n_inputs: m, horizon: n })
}

/// Result of one receding-horizon step.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlStep {
    pub u_applied: DVector<f64>,
    /// Predicted tracked outputs of the first scenario; `None` during warm-up.
    pub predicted_y: Option<Signal>,
    pub t_star: f64,
    pub per_scenario_costs: Vec<f64>,
    /// `None` during warm-up and when the solver broke down numerically.
    pub solver_status: Option<SolveStatus>,
    /// The previous input was reused because the solve did not succeed.
    pub fallback: bool,
}

#[derive(Clone, Debug)]
enum Engine {
    Deepc { blocks: DataBlocks },
    Mdr { model: MdrModel, blocks: DataBlocks, spec_w: AmbiguitySpec, spec_v: AmbiguitySpec },
    Oracle { truth: DiscreteLTI },
}

/// Closed-loop controller state, owned by one loop and advanced by
/// [`Controller::receding_step`].
#[derive(Clone, Debug)]
pub struct Controller {
    cfg: ControllerConfig,
    engine: Engine,
    buffers: IoBuffers,
    n_inputs: usize,
    last_u: DVector<f64>,
    integral: DVector<f64>,
    /// Known state, input and measurement of the previous step (adaptive update).
    prev: Option<(DVector<f64>, DVector<f64>, DVector<f64>)>,
}

impl Controller {
    fn with_engine(cfg: ControllerConfig, engine: Engine, m: usize) -> Result<Self> {
        cfg.validate(m, cfg.q.len())?;
        Ok(Self {
            buffers: IoBuffers::new(cfg.t_ini),
            integral: DVector::zeros(cfg.q.len()),
            last_u: DVector::zeros(m),
            n_inputs: m,
            prev: None,
            cfg,
            engine,
        })
    }

    /// Baseline; `blocks` must be built from the tracked outputs.
    pub fn deepc(cfg: ControllerConfig, blocks: DataBlocks) -> Result<Self> {
        check_blocks(&blocks, &cfg)?;
        let m = blocks.n_inputs();
        Self::with_engine(cfg, Engine::Deepc { blocks }, m)
    }

    /// MDR-DeePC; `blocks` must be built from the unknown-subsystem outputs,
    /// and the noise centers are usually residuals of the offline record.
    pub fn mdr(
        cfg: ControllerConfig,
        model: MdrModel,
        blocks: DataBlocks,
        w_center: EmpiricalDist,
        v_center: EmpiricalDist,
    ) -> Result<Self> {
        check_blocks(&blocks, &cfg)?;
        let m = blocks.n_inputs();
        let spec_w = AmbiguitySpec::new(w_center, cfg.eps_w)?;
        let spec_v = AmbiguitySpec::new(v_center, cfg.eps_v)?;
        Self::with_engine(cfg, Engine::Mdr { model, blocks, spec_w, spec_v }, m)
    }

    /// Exact-model MPC on the full state.
    pub fn oracle(cfg: ControllerConfig, truth: DiscreteLTI) -> Result<Self> {
        let m = truth.n_inputs();
        Self::with_engine(cfg, Engine::Oracle { truth }, m)
    }

    pub fn kind(&self) -> ControllerKind {
        match self.engine {
            Engine::Deepc { .. } => ControllerKind::Deepc,
            Engine::Mdr { .. } => ControllerKind::Mdr,
            Engine::Oracle { .. } => ControllerKind::Oracle,
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn buffers(&self) -> &IoBuffers {
        &self.buffers
    }

    /// Current center of the process-noise ambiguity set (MDR only).
    pub fn w_center(&self) -> Option<&EmpiricalDist> {
        match &self.engine {
            Engine::Mdr { spec_w, .. } => Some(&spec_w.center),
            _ => None,
        }
    }

    /// Builds this controller's problem for the current buffers.
    pub fn formulate(&self, state: &DVector<f64>, r: &Signal, rng_seed: u64) -> Result<Formulation> {
        match &self.engine {
            Engine::Deepc { blocks } => build_deepc(blocks, &self.cfg, &self.buffers, r),
            Engine::Mdr { model, blocks, spec_w, spec_v } => {
                let scenarios = draw_scenarios_from(
                    &model.plant.params,
                    &model.theta_box,
                    spec_w,
                    spec_v,
                    self.cfg.scenarios,
                    self.cfg.horizon,
                    rng_seed,
                )?;
                let xk = state.rows(0, model.nominal.n_k).into_owned();
                build_mdr(model, blocks, &self.cfg, &xk, &self.buffers, &scenarios, r)
            }
            Engine::Oracle { truth } => build_mpc_oracle(truth, &self.cfg, state, r),
        }
    }

    /// One step of the receding-horizon loop.
    ///
    /// `measurement` is the full output vector at this step and `state` the
    /// plant state in hybrid order (MDR reads its known block, the oracle all
    /// of it, DeePC none). While the buffers fill, zero input is applied. A
    /// solve that does not end `Optimal`, or fails outright, reuses the
    /// previous input.
    pub fn receding_step(
        &mut self,
        measurement: &DVector<f64>,
        state: &DVector<f64>,
        r: &Signal,
        rng_seed: u64,
    ) -> Result<ControlStep> {
        let pt = self.cfg.q.len();
        if measurement.len() < pt {
            return Err(Error::DimensionMismatch(format!(
                "measurement has {} channels, {pt} are tracked",
                measurement.len()
            )));
        }
        self.adapt(measurement, state)?;
        if self.cfg.integral_action && !r.is_empty() {
            self.integral += r.get(0) - measurement.rows(0, pt);
        }
        let step = if !self.buffers.is_warm() {
            ControlStep {
                u_applied: DVector::zeros(self.n_inputs),
                predicted_y: None,
                t_star: 0.0,
                per_scenario_costs: Vec::new(),
                solver_status: None,
                fallback: false,
            }
        } else {
            let r_eff = if self.cfg.integral_action {
                let shift = &self.integral * self.cfg.integral_gain;
                Signal::new(r.samples().iter().map(|s| s + &shift).collect())?
            } else {
                r.clone()
            };
            let form = self.formulate(state, &r_eff, rng_seed)?;
            let opts = SolverOptions { tol: self.cfg.solver_tol, ..SolverOptions::default() };
            let res = match solve_with(&form.problem, &opts) {
                Ok(res) => Ok(res),
                Err(Error::Solver(msg)) => Err(msg),
                Err(e) => return Err(e),
            };
            match res {
                Ok(res) if res.status == SolveStatus::Optimal => ControlStep {
                    u_applied: form.first_input(&res.z_star),
                    predicted_y: Some(form.predicted_outputs(&res.z_star, 0)),
                    t_star: res.t_star,
                    per_scenario_costs: form.problem.costs().iter().map(|c| c.value(&res.z_star)).collect(),
                    solver_status: Some(res.status),
                    fallback: false,
                },
                Ok(res) => {
                    log::warn!("{} solve ended {}; holding the previous input", self.kind(), res.status);
                    ControlStep {
                        u_applied: self.last_u.clone(),
                        predicted_y: None,
                        t_star: res.t_star,
                        per_scenario_costs: Vec::new(),
                        solver_status: Some(res.status),
                        fallback: true,
                    }
                }
                Err(msg) => {
                    log::warn!("{} solver broke down ({msg}); holding the previous input", self.kind());
                    ControlStep {
                        u_applied: self.last_u.clone(),
                        predicted_y: None,
                        t_star: f64::NAN,
                        per_scenario_costs: Vec::new(),
                        solver_status: None,
                        fallback: true,
                    }
                }
            }
        };
        self.last_u = step.u_applied.clone();
        self.buffers.push(step.u_applied.clone(), measurement.clone());
        if let Engine::Mdr { model, .. } = &self.engine {
            let nk = model.nominal.n_k;
            self.prev = Some((state.rows(0, nk).into_owned(), step.u_applied.clone(), measurement.clone()));
        }
        Ok(step)
    }

    /// Adds the residual of the previous transition to the noise centers.
    fn adapt(&mut self, _measurement: &DVector<f64>, state: &DVector<f64>) -> Result<()> {
        if !self.cfg.adaptive {
            return Ok(());
        }
        let window = self.cfg.ambiguity_window;
        let Engine::Mdr { model, spec_w, spec_v, .. } = &mut self.engine else { return Ok(()) };
        let Some((x0, u0, y0)) = &self.prev else { return Ok(()) };
        let nk = model.nominal.n_k;
        let x = Signal::new(vec![x0.clone(), state.rows(0, nk).into_owned()])?;
        let u = Signal::new(vec![u0.clone()])?;
        let y = Signal::new(vec![y0.clone()])?;
        let (w, v) = estimate_residuals(&model.nominal, &u, &y, &x)?;
        spec_w.center = update_dist(&spec_w.center, w.atoms(), window)?;
        spec_v.center = update_dist(&spec_v.center, v.atoms(), window)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn controller_names_round_trip() {
        for k in ControllerKind::ALL {
            assert_eq!(k.name().parse::<ControllerKind>().unwrap(), k);
        }
        assert!("lqr".parse::<ControllerKind>().is_err());
    }

    #[test]
    fn terminal_none_is_empty() {
        let cfg = ControllerConfig::default();
        assert!(terminal_set(&cfg, &DVector::from_element(3, 1.0)).is_none());
    }

    #[test]
    fn terminal_zero_radius_gives_equalities() {
        let cfg = ControllerConfig { terminal: TerminalMode::BoxAroundReference { radius: 0.0 }, ..Default::default() };
        let set = terminal_set(&cfg, &DVector::from_column_slice(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(set.target.as_slice(), &[1.0, 2.0]);
        let rows = set.rows(&DMatrix::identity(2, 2), &DVector::zeros(2));
        let (e, f) = rows.eq.unwrap();
        assert!(rows.ineq.is_none());
        assert_eq!(e, DMatrix::identity(2, 2));
        assert_eq!(f.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn terminal_box_has_two_sided_rows() {
        let cfg = ControllerConfig { terminal: TerminalMode::BoxAroundReference { radius: 0.1 }, ..Default::default() };
        let set = terminal_set(&cfg, &DVector::from_column_slice(&[1.0, -1.0, 0.0])).unwrap();
        let rows = set.rows(&DMatrix::identity(2, 2), &DVector::zeros(2));
        assert!(rows.eq.is_none());
        let (g, h) = rows.ineq.unwrap();
        assert_eq!(g.nrows(), 4);
        // pos <= target + 0.1 and -pos <= -(target - 0.1)
        let expect = [1.1, -0.9, -0.9, 1.1];
        for (a, b) in h.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(g[(2, 0)], -1.0);
    }

    #[test]
    fn buffers_keep_the_last_window() {
        let mut b = IoBuffers::new(2);
        assert!(!b.is_warm());
        for k in 0..5 {
            b.push(DVector::from_element(1, k as f64), DVector::from_column_slice(&[k as f64, -(k as f64)]));
        }
        assert!(b.is_warm());
        assert_eq!(b.u_ini().as_slice(), &[3.0, 4.0]);
        assert_eq!(b.y_ini(&[1]).as_slice(), &[-3.0, -4.0]);
        assert_eq!(b.y_ini(&[0, 1]).as_slice(), &[3.0, -3.0, 4.0, -4.0]);
    }

    #[test]
    fn config_validation() {
        let ok = ControllerConfig::default();
        ok.validate(3, 3).unwrap();
        assert!(ok.validate(2, 3).is_err());
        let mut bad = ok.clone();
        bad.q[0][0] = -1.0;
        assert!(bad.validate(3, 3).is_err());
        let mut bad = ok.clone();
        bad.u_bounds = Some(vec![[1.0, 0.0]; 3]);
        assert!(bad.validate(3, 3).is_err());
        let mut bad = ok.clone();
        bad.t_ini = 0;
        assert!(bad.validate(3, 3).is_err());
    }

    #[test]
    fn config_parses_terminal_modes() {
        let t: TerminalMode = serde_json::from_str(r#"{"mode":"box_around_reference","radius":0.2}"#).unwrap();
        assert_eq!(t, TerminalMode::BoxAroundReference { radius: 0.2 });
        let t: TerminalMode = serde_json::from_str(r#"{"mode":"none"}"#).unwrap();
        assert_eq!(t, TerminalMode::None);
    }
}
