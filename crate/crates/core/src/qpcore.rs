//! Epigraph scenario programs and a dense primal-dual interior-point solver.
//!
//! Problems have the form
//!
//! ```text
//! minimize t  s.t.  z'P_j z + q_j'z + r_j <= t   (j = 1..J)
//!                   E z = f,  G z <= h,  lo <= z <= hi
//! ```
//!
//! Equalities (including boxes with `lo == hi`) are eliminated through an
//! orthonormal null-space basis; the remaining problem is solved with a
//! Mehrotra predictor-corrector method that keeps the quadratic constraints
//! strictly feasible and uses their exact Hessians.

use std::fmt;
use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, max_abs_vec, min_eigenvalue, range_null, symmetrize};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 200;

/// `z'Pz + q'z + r0`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadCost {
    p: DMatrix<f64>,
    q: DVector<f64>,
    r0: f64,
}

impl QuadCost {
    /// Checked constructor: `P` must be symmetric with smallest eigenvalue
    /// `>= -1e-10 * ||P||`.
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, r0: f64) -> Result<Self> {
        let c = Self::shaped(p, q, r0)?;
        let scale = max_abs(&c.p);
        if max_abs(&(&c.p - c.p.transpose())) > 1e-12 * scale.max(1.0) {
            return Err(Error::NotPsd("matrix is not symmetric".into()));
        }
        let lmin = min_eigenvalue(&c.p);
        if lmin < -1e-10 * scale * c.p.nrows() as f64 {
            return Err(Error::NotPsd(format!("smallest eigenvalue {lmin:e}")));
        }
        Ok(c)
    }

    /// For matrices that are PSD by construction (sums of Gram matrices); the
    /// input is symmetrized but not eigen-checked.
    pub fn from_gram(p: DMatrix<f64>, q: DVector<f64>, r0: f64) -> Result<Self> {
        let mut c = Self::shaped(p, q, r0)?;
        c.p = symmetrize(&c.p);
        Ok(c)
    }

    fn shaped(p: DMatrix<f64>, q: DVector<f64>, r0: f64) -> Result<Self> {
        if p.nrows() != p.ncols() || p.nrows() != q.len() {
            return Err(Error::DimensionMismatch(format!("cost has P {:?} and q of length {}", p.shape(), q.len())));
        }
        if !r0.is_finite() || p.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("cost has non-finite entries".into()));
        }
        Ok(Self { p, q, r0 })
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn r0(&self) -> f64 {
        self.r0
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Caller guarantees `z.len() == dim()`.
    pub fn value(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.p * z)) + self.q.dot(z) + self.r0
    }

    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.p * z * 2.0 + &self.q
    }
}

pub fn eval_cost(c: &QuadCost, z: &DVector<f64>) -> Result<f64> {
    if z.len() != c.dim() {
        return Err(Error::DimensionMismatch(format!("point has dimension {}, cost has {}", z.len(), c.dim())));
    }
    Ok(c.value(z))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvexProblem {
    n_z: usize,
    costs: Vec<QuadCost>,
    eq_a: DMatrix<f64>,
    eq_b: DVector<f64>,
    ineq_a: DMatrix<f64>,
    ineq_b: DVector<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl ConvexProblem {
    /// Unconstrained problem with no costs yet.
    pub fn new(n_z: usize) -> Self {
        Self {
            n_z,
            costs: Vec::new(),
            eq_a: DMatrix::zeros(0, n_z),
            eq_b: DVector::zeros(0),
            ineq_a: DMatrix::zeros(0, n_z),
            ineq_b: DVector::zeros(0),
            lower: DVector::from_element(n_z, f64::NEG_INFINITY),
            upper: DVector::from_element(n_z, f64::INFINITY),
        }
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn costs(&self) -> &[QuadCost] {
        &self.costs
    }

    pub fn equalities(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.eq_a, &self.eq_b)
    }

    pub fn inequalities(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.ineq_a, &self.ineq_b)
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn add_cost(&mut self, c: QuadCost) -> Result<()> {
        if c.dim() != self.n_z {
            return Err(Error::DimensionMismatch(format!(
                "cost dimension {} differs from decision dimension {}",
                c.dim(),
                self.n_z
            )));
        }
        self.costs.push(c);
        Ok(())
    }

    fn append_rows(
        a: &mut DMatrix<f64>,
        b: &mut DVector<f64>,
        ra: &DMatrix<f64>,
        rb: &DVector<f64>,
        n_z: usize,
    ) -> Result<()> {
        if ra.ncols() != n_z || ra.nrows() != rb.len() {
            return Err(Error::DimensionMismatch(format!(
                "constraint block {:?} with right-hand side {} for {n_z} variables",
                ra.shape(),
                rb.len()
            )));
        }
        let old = a.nrows();
        let mut na = DMatrix::zeros(old + ra.nrows(), n_z);
        na.rows_mut(0, old).copy_from(a);
        na.rows_mut(old, ra.nrows()).copy_from(ra);
        let mut nb = DVector::zeros(old + rb.len());
        nb.rows_mut(0, old).copy_from(b);
        nb.rows_mut(old, rb.len()).copy_from(rb);
        *a = na;
        *b = nb;
        Ok(())
    }

    /// Appends rows `E z = f`.
    pub fn add_equalities(&mut self, e: &DMatrix<f64>, f: &DVector<f64>) -> Result<()> {
        Self::append_rows(&mut self.eq_a, &mut self.eq_b, e, f, self.n_z)
    }

    /// Appends rows `G z <= h`.
    pub fn add_inequalities(&mut self, g: &DMatrix<f64>, h: &DVector<f64>) -> Result<()> {
        Self::append_rows(&mut self.ineq_a, &mut self.ineq_b, g, h, self.n_z)
    }

    /// Intersects the box of coordinate `i` with `[lo, hi]`.
    pub fn bound(&mut self, i: usize, lo: f64, hi: f64) -> Result<()> {
        if i >= self.n_z || lo.is_nan() || hi.is_nan() {
            return Err(Error::DimensionMismatch(format!("bad bound on coordinate {i}")));
        }
        self.lower[i] = self.lower[i].max(lo);
        self.upper[i] = self.upper[i].min(hi);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.costs.is_empty() {
            return Err(Error::InvalidParameter("problem needs at least one epigraph cost".into()));
        }
        Ok(())
    }

    /// Plain-text dump: dimensions first, then every matrix row-major.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        fn mat<W: Write>(w: &mut W, m: &DMatrix<f64>) -> std::io::Result<()> {
            for i in 0..m.nrows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
            Ok(())
        }
        fn vec<W: Write>(w: &mut W, v: &DVector<f64>) -> std::io::Result<()> {
            let row: Vec<String> = v.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", row.join(" "))
        }
        writeln!(w, "n_z {}", self.n_z)?;
        writeln!(w, "costs {}", self.costs.len())?;
        writeln!(w, "equalities {}", self.eq_a.nrows())?;
        writeln!(w, "inequalities {}", self.ineq_a.nrows())?;
        for (j, c) in self.costs.iter().enumerate() {
            writeln!(w, "cost {j} P")?;
            mat(&mut w, &c.p)?;
            writeln!(w, "cost {j} q")?;
            vec(&mut w, &c.q)?;
            writeln!(w, "cost {j} r0\n{:e}", c.r0)?;
        }
        writeln!(w, "E")?;
        mat(&mut w, &self.eq_a)?;
        writeln!(w, "f")?;
        vec(&mut w, &self.eq_b)?;
        writeln!(w, "G")?;
        mat(&mut w, &self.ineq_a)?;
        writeln!(w, "h")?;
        vec(&mut w, &self.ineq_b)?;
        writeln!(w, "lo")?;
        vec(&mut w, &self.lower)?;
        writeln!(w, "hi")?;
        vec(&mut w, &self.upper)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIterations => "max_iterations",
        };
        f.write_str(s)
    }
}

/// Lagrange multipliers in the original coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Multipliers {
    pub epigraph: DVector<f64>,
    pub equality: DVector<f64>,
    pub inequality: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub z_star: DVector<f64>,
    pub t_star: f64,
    pub status: SolveStatus,
    pub kkt_primal: f64,
    pub kkt_dual: f64,
    pub kkt_gap: f64,
    pub iterations: usize,
    pub multipliers: Multipliers,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER }
    }
}

/// Scaled KKT residuals of `(z, t, multipliers)`, recomputed from the problem data.
///
/// Every quantity is relative: primal rows by `1 + |rhs|`, stationarity by
/// `1 + ` the largest term entering it, complementarity products by `1 + |t|`.
pub fn kkt_residuals(p: &ConvexProblem, r: &SolveResult) -> KktResiduals {
    kkt_at(p, &r.z_star, r.t_star, &r.multipliers)
}

fn kkt_at(p: &ConvexProblem, z: &DVector<f64>, t: f64, mu: &Multipliers) -> KktResiduals {
    let tscale = 1.0 + t.abs();
    let mut primal: f64 = 0.0;
    let mut gap: f64 = 0.0;
    let mut sign: f64 = 0.0;
    let mut grad_epi = DVector::zeros(p.n_z);
    let mut lam_sum = 0.0;
    for (j, c) in p.costs.iter().enumerate() {
        let phi = c.value(z);
        let lam = mu.epigraph[j];
        primal = primal.max((phi - t).max(0.0) / tscale);
        gap = gap.max((lam * (t - phi)).abs() / tscale);
        sign = sign.max(-lam);
        lam_sum += lam;
        grad_epi += c.gradient(z) * lam;
    }
    let eq_term = p.eq_a.tr_mul(&mu.equality);
    if p.eq_a.nrows() > 0 {
        let fs = 1.0 + max_abs_vec(&p.eq_b);
        primal = primal.max(max_abs_vec(&(&p.eq_a * z - &p.eq_b)) / fs);
    }
    let in_term = p.ineq_a.tr_mul(&mu.inequality);
    if p.ineq_a.nrows() > 0 {
        let gz = &p.ineq_a * z;
        for k in 0..gz.len() {
            let slack = p.ineq_b[k] - gz[k];
            primal = primal.max((-slack).max(0.0) / (1.0 + p.ineq_b[k].abs()));
            gap = gap.max((mu.inequality[k] * slack).abs() / tscale);
            sign = sign.max(-mu.inequality[k]);
        }
    }
    let mut box_term = DVector::zeros(p.n_z);
    for i in 0..p.n_z {
        let (lo, hi) = (p.lower[i], p.upper[i]);
        if lo.is_finite() {
            primal = primal.max((lo - z[i]).max(0.0) / (1.0 + lo.abs()));
            gap = gap.max((mu.lower[i] * (z[i] - lo)).abs() / tscale);
        }
        if hi.is_finite() {
            primal = primal.max((z[i] - hi).max(0.0) / (1.0 + hi.abs()));
            gap = gap.max((mu.upper[i] * (hi - z[i])).abs() / tscale);
        }
        sign = sign.max(-mu.lower[i]).max(-mu.upper[i]);
        box_term[i] = mu.upper[i] - mu.lower[i];
    }
    let stat = &grad_epi + &eq_term + &in_term + &box_term;
    let dscale =
        1.0 + max_abs_vec(&grad_epi).max(max_abs_vec(&eq_term)).max(max_abs_vec(&in_term)).max(max_abs_vec(&box_term));
    let dual = (max_abs_vec(&stat) / dscale).max((1.0 - lam_sum).abs()).max(sign);
    KktResiduals { primal, dual, gap }
}

pub fn solve(p: &ConvexProblem, tol: f64) -> Result<SolveResult> {
    solve_with(p, &SolverOptions { tol, ..SolverOptions::default() })
}

/// Where a reduced linear row comes from.
#[derive(Clone, Copy, Debug)]
enum RowKind {
    Lower(usize),
    Upper(usize),
    Ineq(usize),
}

/// The problem in null-space coordinates `z = z0 + Z y`.
struct Reduced {
    n_y: usize,
    z0: DVector<f64>,
    /// `None` means `Z = I`.
    basis: Option<DMatrix<f64>>,
    costs: Vec<QuadCost>,
    /// Simple bounds `sign * y[idx] <= b` (only when `Z = I`).
    simple: Vec<(usize, f64, f64, RowKind)>,
    rows_a: DMatrix<f64>,
    rows_b: DVector<f64>,
    rows_kind: Vec<RowKind>,
    /// Equality matrix after adding pinned coordinates, and the row count that
    /// belongs to the user block.
    eq_full: DMatrix<f64>,
    eq_user_rows: usize,
    pinned: Vec<usize>,
}

impl Reduced {
    fn lift(&self, y: &DVector<f64>) -> DVector<f64> {
        match &self.basis {
            Some(z) => &self.z0 + z * y,
            None => y.clone(),
        }
    }
}

fn infeasible_result(p: &ConvexProblem, iterations: usize) -> SolveResult {
    SolveResult {
        z_star: DVector::zeros(p.n_z),
        t_star: f64::INFINITY,
        status: SolveStatus::Infeasible,
        kkt_primal: f64::INFINITY,
        kkt_dual: f64::INFINITY,
        kkt_gap: f64::INFINITY,
        iterations,
        multipliers: zero_multipliers(p),
    }
}

fn zero_multipliers(p: &ConvexProblem) -> Multipliers {
    Multipliers {
        epigraph: DVector::zeros(p.costs.len()),
        equality: DVector::zeros(p.eq_a.nrows()),
        inequality: DVector::zeros(p.ineq_a.nrows()),
        lower: DVector::zeros(p.n_z),
        upper: DVector::zeros(p.n_z),
    }
}

/// Returns `None` when the equalities or boxes are inconsistent.
fn reduce(p: &ConvexProblem) -> Option<Reduced> {
    let n = p.n_z;
    if (0..n).any(|i| p.lower[i] > p.upper[i]) {
        return None;
    }
    let pinned: Vec<usize> = (0..n).filter(|&i| p.lower[i] == p.upper[i]).collect();
    let m_eq = p.eq_a.nrows() + pinned.len();
    let mut eq_full = DMatrix::zeros(m_eq, n);
    let mut eq_rhs = DVector::zeros(m_eq);
    eq_full.rows_mut(0, p.eq_a.nrows()).copy_from(&p.eq_a);
    eq_rhs.rows_mut(0, p.eq_a.nrows()).copy_from(&p.eq_b);
    for (k, &i) in pinned.iter().enumerate() {
        eq_full[(p.eq_a.nrows() + k, i)] = 1.0;
        eq_rhs[p.eq_a.nrows() + k] = p.lower[i];
    }
    let is_pinned = |i: usize| pinned.binary_search(&i).is_ok();

    if m_eq == 0 {
        let mut simple = Vec::new();
        for i in 0..n {
            if p.lower[i].is_finite() {
                simple.push((i, -1.0, -p.lower[i], RowKind::Lower(i)));
            }
            if p.upper[i].is_finite() {
                simple.push((i, 1.0, p.upper[i], RowKind::Upper(i)));
            }
        }
        return Some(Reduced {
            n_y: n,
            z0: DVector::zeros(n),
            basis: None,
            costs: p.costs.clone(),
            simple,
            rows_a: p.ineq_a.clone(),
            rows_b: p.ineq_b.clone(),
            rows_kind: (0..p.ineq_a.nrows()).map(RowKind::Ineq).collect(),
            eq_full,
            eq_user_rows: 0,
            pinned,
        });
    }

    let rn = range_null(&eq_full);
    let z0 = &rn.pinv * &eq_rhs;
    let consistency = max_abs_vec(&(&eq_full * &z0 - &eq_rhs));
    if consistency > 1e-9 * (1.0 + max_abs_vec(&eq_rhs)) {
        return None;
    }
    let zb = rn.null;
    let n_y = zb.ncols();
    let costs = p
        .costs
        .iter()
        .map(|c| {
            let pz = &c.p * &zb;
            QuadCost { p: symmetrize(&zb.tr_mul(&pz)), q: zb.tr_mul(&(&c.p * &z0 * 2.0 + &c.q)), r0: c.value(&z0) }
        })
        .collect();
    let mut rows: Vec<(DVector<f64>, f64, RowKind)> = Vec::new();
    for i in 0..n {
        if is_pinned(i) {
            continue;
        }
        let zi = zb.row(i).transpose();
        if p.lower[i].is_finite() {
            rows.push((-&zi, -(p.lower[i] - z0[i]), RowKind::Lower(i)));
        }
        if p.upper[i].is_finite() {
            rows.push((zi.clone(), p.upper[i] - z0[i], RowKind::Upper(i)));
        }
    }
    if p.ineq_a.nrows() > 0 {
        let gz = &p.ineq_a * &zb;
        let h = &p.ineq_b - &p.ineq_a * &z0;
        for k in 0..gz.nrows() {
            rows.push((gz.row(k).transpose(), h[k], RowKind::Ineq(k)));
        }
    }
    let mut rows_a = DMatrix::zeros(rows.len(), n_y);
    let mut rows_b = DVector::zeros(rows.len());
    let mut rows_kind = Vec::with_capacity(rows.len());
    for (k, (a, b, kind)) in rows.into_iter().enumerate() {
        rows_a.set_row(k, &a.transpose());
        rows_b[k] = b;
        rows_kind.push(kind);
    }
    Some(Reduced {
        n_y,
        z0,
        basis: Some(zb),
        costs,
        simple: Vec::new(),
        rows_a,
        rows_b,
        rows_kind,
        eq_full,
        eq_user_rows: p.eq_a.nrows(),
        pinned,
    })
}

/// Iterate of the interior-point method. Every inequality, quadratic or
/// linear, carries its own slack and multiplier.
struct Iterate {
    y: DVector<f64>,
    t: f64,
    s_e: DVector<f64>,
    lam_e: DVector<f64>,
    /// Simple bounds followed by the dense rows.
    s_l: DVector<f64>,
    lam_l: DVector<f64>,
}

struct Eval {
    grads: Vec<DVector<f64>>,
    /// `phi_j(y) - t + s_j`.
    r_pe: DVector<f64>,
    /// `a'y - b + s` per linear row.
    r_pl: DVector<f64>,
}

impl Reduced {
    fn n_lin(&self) -> usize {
        self.simple.len() + self.rows_a.nrows()
    }

    fn lin_values(&self, y: &DVector<f64>) -> DVector<f64> {
        let ns = self.simple.len();
        let mut v = DVector::zeros(self.n_lin());
        for (k, &(i, s, b, _)) in self.simple.iter().enumerate() {
            v[k] = s * y[i] - b;
        }
        if self.rows_a.nrows() > 0 {
            let ay = &self.rows_a * y - &self.rows_b;
            v.rows_mut(ns, ay.len()).copy_from(&ay);
        }
        v
    }

    /// `A' lam` for the linear rows.
    fn lin_tr_mul(&self, lam: &DVector<f64>) -> DVector<f64> {
        let ns = self.simple.len();
        let mut g = if self.rows_a.nrows() > 0 {
            self.rows_a.tr_mul(&lam.rows(ns, self.rows_a.nrows()).into_owned())
        } else {
            DVector::zeros(self.n_y)
        };
        for (k, &(i, s, _, _)) in self.simple.iter().enumerate() {
            g[i] += s * lam[k];
        }
        g
    }

    fn lin_mul(&self, dy: &DVector<f64>) -> DVector<f64> {
        let ns = self.simple.len();
        let mut v = DVector::zeros(self.n_lin());
        for (k, &(i, s, _, _)) in self.simple.iter().enumerate() {
            v[k] = s * dy[i];
        }
        if self.rows_a.nrows() > 0 {
            let ay = &self.rows_a * dy;
            v.rows_mut(ns, ay.len()).copy_from(&ay);
        }
        v
    }

    fn evaluate(&self, it: &Iterate) -> Eval {
        let r_pe = DVector::from_iterator(
            self.costs.len(),
            self.costs.iter().enumerate().map(|(j, c)| c.value(&it.y) - it.t + it.s_e[j]),
        );
        let grads = self.costs.iter().map(|c| c.gradient(&it.y)).collect();
        Eval { grads, r_pe, r_pl: self.lin_values(&it.y) + &it.s_l }
    }

    fn rhs_scale(&self) -> f64 {
        1.0 + self.simple.iter().map(|s| s.2.abs()).fold(0.0, f64::max).max(max_abs_vec(&self.rows_b))
    }
}

struct Residuals {
    r_dy: DVector<f64>,
    r_dt: f64,
    /// Linear-row infeasibility alone.
    pres_lin: f64,
    pres: f64,
    dres: f64,
    gap: f64,
    mu: f64,
}

fn residuals(red: &Reduced, it: &Iterate, ev: &Eval) -> Residuals {
    let mut epi = DVector::zeros(red.n_y);
    for (j, g) in ev.grads.iter().enumerate() {
        epi.axpy(it.lam_e[j], g, 1.0);
    }
    let lin = red.lin_tr_mul(&it.lam_l);
    let r_dy = &epi + &lin;
    let r_dt = 1.0 - it.lam_e.sum();
    let tscale = 1.0 + it.t.abs();
    let pres_lin = max_abs_vec(&ev.r_pl) / red.rhs_scale();
    let pres = pres_lin.max(max_abs_vec(&ev.r_pe) / tscale);
    let dres = (max_abs_vec(&r_dy) / (1.0 + max_abs_vec(&epi).max(max_abs_vec(&lin)))).max(r_dt.abs());
    let comp_e = it.s_e.component_mul(&it.lam_e);
    let comp_l = it.s_l.component_mul(&it.lam_l);
    let m = (comp_e.len() + comp_l.len()) as f64;
    let mu = (comp_e.sum() + comp_l.sum()) / m;
    let gap = comp_e.iter().chain(comp_l.iter()).fold(0.0f64, |a, v| a.max(v.abs())) / tscale;
    Residuals { r_dy, r_dt, pres_lin, pres, dres, gap, mu }
}

fn factor(red: &Reduced, it: &Iterate, ev: &Eval) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let n = red.n_y;
    let d_e = it.lam_e.component_div(&it.s_e);
    let d_l = it.lam_l.component_div(&it.s_l);
    let mut kyy = DMatrix::zeros(n, n);
    for (j, c) in red.costs.iter().enumerate() {
        let w = 2.0 * it.lam_e[j];
        kyy.zip_apply(&c.p, |a, b| *a += w * b);
        kyy.ger(d_e[j], &ev.grads[j], &ev.grads[j], 1.0);
    }
    for (kk, &(i, _, _, _)) in red.simple.iter().enumerate() {
        kyy[(i, i)] += d_l[kk];
    }
    if red.rows_a.nrows() > 0 {
        let ns = red.simple.len();
        let mut scaled = red.rows_a.clone();
        for r in 0..scaled.nrows() {
            let w = d_l[ns + r].sqrt();
            scaled.row_mut(r).scale_mut(w);
        }
        kyy += scaled.tr_mul(&scaled);
    }
    let mut k = DMatrix::zeros(n + 1, n + 1);
    k.view_mut((0, 0), (n, n)).copy_from(&kyy);
    let mut kyt = DVector::zeros(n);
    for (j, g) in ev.grads.iter().enumerate() {
        kyt.axpy(-d_e[j], g, 1.0);
    }
    k.view_mut((0, n), (n, 1)).copy_from(&kyt);
    k.view_mut((n, 0), (1, n)).copy_from(&kyt.transpose());
    k[(n, n)] = d_e.sum();

    let diag_max = (0..=n).map(|i| k[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut reg = 0.0;
    for _ in 0..12 {
        let mut kr = k.clone();
        if reg > 0.0 {
            for i in 0..=n {
                kr[(i, i)] += reg;
            }
        }
        if let Some(chol) = kr.cholesky() {
            return Some(chol);
        }
        reg = if reg == 0.0 { 1e-12 * diag_max } else { reg * 100.0 };
    }
    None
}

struct Direction {
    dy: DVector<f64>,
    dt: f64,
    ds_e: DVector<f64>,
    dl_e: DVector<f64>,
    ds_l: DVector<f64>,
    dl_l: DVector<f64>,
}

/// Newton direction for complementarity residuals `rc = S lam - target`.
///
/// With `c(x) + s = 0` linearized as `J dx + ds = -r_p` and
/// `S dlam + Lam ds = -rc`, the reduced system is
/// `(H + J' S^-1 Lam J) dx = -r_d - J' S^-1 (Lam r_p - rc)`.
fn direction(
    red: &Reduced,
    it: &Iterate,
    ev: &Eval,
    chol: &Cholesky<f64, nalgebra::Dyn>,
    res: &Residuals,
    rc_e: &DVector<f64>,
    rc_l: &DVector<f64>,
) -> Direction {
    let n = red.n_y;
    let we = (it.lam_e.component_mul(&ev.r_pe) - rc_e).component_div(&it.s_e);
    let wl = (it.lam_l.component_mul(&ev.r_pl) - rc_l).component_div(&it.s_l);
    let mut rhs = DVector::zeros(n + 1);
    let mut ry = -&res.r_dy - red.lin_tr_mul(&wl);
    for (j, g) in ev.grads.iter().enumerate() {
        ry.axpy(-we[j], g, 1.0);
    }
    rhs.rows_mut(0, n).copy_from(&ry);
    rhs[n] = -res.r_dt + we.sum();
    let dx = chol.solve(&rhs);
    let dy = dx.rows(0, n).into_owned();
    let dt = dx[n];
    let ds_e =
        DVector::from_iterator(ev.grads.len(), ev.grads.iter().enumerate().map(|(j, g)| -ev.r_pe[j] + dt - g.dot(&dy)));
    let ds_l = -&ev.r_pl - red.lin_mul(&dy);
    let dl_e = (-rc_e - it.lam_e.component_mul(&ds_e)).component_div(&it.s_e);
    let dl_l = (-rc_l - it.lam_l.component_mul(&ds_l)).component_div(&it.s_l);
    Direction { dy, dt, ds_e, dl_e, ds_l, dl_l }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>, tau: f64) -> f64 {
    let mut a: f64 = 1.0;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            a = a.min(-tau * v[i] / dv[i]);
        }
    }
    a
}

fn step_length(it: &Iterate, d: &Direction, tau: f64) -> (f64, f64) {
    let primal = max_step(&it.s_e, &d.ds_e, tau).min(max_step(&it.s_l, &d.ds_l, tau));
    let dual = max_step(&it.lam_e, &d.dl_e, tau).min(max_step(&it.lam_l, &d.dl_l, tau));
    (primal, dual)
}

/// Solves with explicit options.
pub fn solve_with(p: &ConvexProblem, opts: &SolverOptions) -> Result<SolveResult> {
    p.validate()?;
    let Some(red) = reduce(p) else {
        return Ok(infeasible_result(p, 0));
    };
    let n = red.n_y;
    let je = red.costs.len();
    let nl = red.n_lin();

    // Start at the minimizer of the summed costs.
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for c in &red.costs {
        h += &c.p;
        g += &c.q;
    }
    let hscale = (0..n).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    for i in 0..n {
        h[(i, i)] += 1e-8 * hscale;
    }
    let y = h.cholesky().map(|c| c.solve(&(-&g * 0.5))).unwrap_or_else(|| DVector::zeros(n));
    let phi0 = DVector::from_iterator(je, red.costs.iter().map(|c| c.value(&y)));
    let spread = phi0.max() - phi0.min();
    let margin = (0.1 * phi0.amax()).max(spread).max(1.0);
    let t = phi0.max() + margin;
    let s_e = phi0.map(|v| t - v);
    let s_l = red.lin_values(&y).map(|v| (-v).max(1.0));
    let lam_e = DVector::from_element(je, 1.0 / je as f64);
    let mu0 = s_e.component_mul(&lam_e).sum() / je as f64;
    let lam_l = s_l.map(|s| mu0 / s);
    let mut it = Iterate { y, t, s_e, lam_e, s_l, lam_l };

    let tau_min: f64 = 0.99;
    let inner_tol = 0.1 * opts.tol;
    let mut best_pres = f64::INFINITY;
    let mut best_iter = 0;
    let m_tot = (je + nl) as f64;
    for iter in 0..opts.max_iter {
        let ev = red.evaluate(&it);
        let res = residuals(&red, &it, &ev);
        log::trace!(
            "ipm {iter}: pres {:.3e} dres {:.3e} gap {:.3e} mu {:.3e} t {:.6e}",
            res.pres,
            res.dres,
            res.gap,
            res.mu,
            it.t
        );
        if res.pres <= inner_tol && res.dres <= inner_tol && res.gap <= inner_tol {
            let out = finish(p, &red, &it, iter, SolveStatus::Optimal);
            if out.kkt_primal <= opts.tol && out.kkt_dual <= opts.tol && out.kkt_gap <= opts.tol {
                return Ok(out);
            }
            if res.gap <= 1e-4 * inner_tol && res.dres <= 1e-4 * inner_tol && res.pres <= 1e-4 * inner_tol {
                // The interior iterate cannot improve the lifted residuals further.
                return Ok(finish(p, &red, &it, iter, SolveStatus::MaxIterations));
            }
        }
        if res.pres_lin < 0.5 * best_pres {
            best_pres = res.pres_lin;
            best_iter = iter;
        }
        let lam_max = it.lam_l.iter().cloned().fold(0.0, f64::max);
        if res.pres_lin > inner_tol && (iter - best_iter > 40 || lam_max > 1e14 * (1.0 + it.t.abs())) {
            return Ok(infeasible_result(p, iter));
        }

        let Some(chol) = factor(&red, &it, &ev) else {
            return Err(Error::Solver("Newton matrix could not be factorized".into()));
        };
        // Predictor.
        let rc_e = it.s_e.component_mul(&it.lam_e);
        let rc_l = it.s_l.component_mul(&it.lam_l);
        let aff = direction(&red, &it, &ev, &chol, &res, &rc_e, &rc_l);
        let (ap, ad) = step_length(&it, &aff, 1.0);
        let mu_aff = ((&it.s_e + &aff.ds_e * ap).dot(&(&it.lam_e + &aff.dl_e * ad))
            + (&it.s_l + &aff.ds_l * ap).dot(&(&it.lam_l + &aff.dl_l * ad)))
            / m_tot;
        let sigma = (mu_aff / res.mu).clamp(0.0, 1.0).powi(3);
        // Corrector.
        // Do not let complementarity run ahead of feasibility: the quadratic
        // constraints make the Newton matrix badly conditioned otherwise.
        let infeas = res.pres.max(res.dres) * (1.0 + it.t.abs());
        let target = (sigma * res.mu).max((0.1 * infeas).min(0.5 * res.mu));
        let rc_e = rc_e + aff.ds_e.component_mul(&aff.dl_e) - DVector::from_element(je, target);
        let rc_l = rc_l + aff.ds_l.component_mul(&aff.dl_l) - DVector::from_element(nl, target);
        let d = direction(&red, &it, &ev, &chol, &res, &rc_e, &rc_l);
        let tau = tau_min.max(1.0 - res.mu.min(1e-2));
        let (ap, ad) = step_length(&it, &d, tau);
        // A common step keeps the Hessian weights consistent with the primal point.
        let alpha = ap.min(ad);
        it.y.axpy(alpha, &d.dy, 1.0);
        it.t += alpha * d.dt;
        it.s_e.axpy(alpha, &d.ds_e, 1.0);
        it.s_l.axpy(alpha, &d.ds_l, 1.0);
        it.lam_e.axpy(alpha, &d.dl_e, 1.0);
        it.lam_l.axpy(alpha, &d.dl_l, 1.0);
    }
    Ok(finish(p, &red, &it, opts.max_iter, SolveStatus::MaxIterations))
}

/// Lifts an iterate to the original coordinates, tightens `t` to the largest
/// cost and recovers the equality multipliers from stationarity.
fn finish(p: &ConvexProblem, red: &Reduced, it: &Iterate, iterations: usize, status: SolveStatus) -> SolveResult {
    let z = red.lift(&it.y);
    let t = p.costs.iter().map(|c| c.value(&z)).fold(f64::NEG_INFINITY, f64::max);
    let mut mu = zero_multipliers(p);
    mu.epigraph.copy_from(&it.lam_e);
    let ns = red.simple.len();
    let assign = |kind: RowKind, v: f64, mu: &mut Multipliers| match kind {
        RowKind::Lower(i) => mu.lower[i] += v,
        RowKind::Upper(i) => mu.upper[i] += v,
        RowKind::Ineq(k) => mu.inequality[k] += v,
    };
    for (k, s) in red.simple.iter().enumerate() {
        assign(s.3, it.lam_l[k], &mut mu);
    }
    for (k, kind) in red.rows_kind.iter().enumerate() {
        assign(*kind, it.lam_l[ns + k], &mut mu);
    }
    if red.eq_full.nrows() > 0 {
        let mut g = DVector::zeros(p.n_z);
        for (j, c) in p.costs.iter().enumerate() {
            g.axpy(mu.epigraph[j], &c.gradient(&z), 1.0);
        }
        g += p.ineq_a.tr_mul(&mu.inequality);
        g += &mu.upper - &mu.lower;
        // E' nu = -g in the least-squares sense.
        let nu = crate::linalg::pinv(&red.eq_full.transpose()) * (-g);
        for k in 0..red.eq_user_rows {
            mu.equality[k] = nu[k];
        }
        for (k, &i) in red.pinned.iter().enumerate() {
            let v = nu[red.eq_user_rows + k];
            mu.upper[i] += v.max(0.0);
            mu.lower[i] += (-v).max(0.0);
        }
    }
    let kkt = kkt_at(p, &z, t, &mu);
    SolveResult {
        z_star: z,
        t_star: t,
        status,
        kkt_primal: kkt.primal,
        kkt_dual: kkt.dual,
        kkt_gap: kkt.gap,
        iterations,
        multipliers: mu,
    }
}
