//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff used for pseudo-inverses and null spaces.
fn svd_cutoff(sv: &DVector<f64>, rows: usize, cols: usize) -> f64 {
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    smax * (rows.max(cols) as f64) * f64::EPSILON * 16.0
}

/// Moore-Penrose pseudo-inverse.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    range_null(a).pinv
}

/// Pseudo-inverse and orthonormal null-space basis of a matrix.
#[derive(Clone, Debug)]
pub struct RangeNull {
    pub pinv: DMatrix<f64>,
    /// Columns span `ker(A)`; `n x (n - rank)`.
    pub null: DMatrix<f64>,
    pub rank: usize,
}

pub fn range_null(a: &DMatrix<f64>) -> RangeNull {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return RangeNull { pinv: DMatrix::zeros(n, m), null: DMatrix::identity(n, n), rank: 0 };
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let cut = svd_cutoff(&svd.singular_values, m, n);
    // nalgebra does not sort singular values; collect the significant ones.
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > cut).collect();
    let r = keep.len();
    let mut v1 = DMatrix::zeros(n, r);
    let mut pinv = DMatrix::zeros(n, m);
    for (c, &i) in keep.iter().enumerate() {
        let vi = v_t.row(i).transpose();
        v1.set_column(c, &vi);
        pinv += (&vi / svd.singular_values[i]) * u.column(i).transpose();
    }
    let null = if r == n {
        DMatrix::zeros(n, 0)
    } else if r == 0 {
        DMatrix::identity(n, n)
    } else {
        let qr = v1.qr();
        let mut qt = DMatrix::identity(n, n);
        qr.q_tr_mul(&mut qt);
        qt.rows(r, n - r).transpose()
    };
    RangeNull { pinv, null, rank: r }
}

/// `(P + P^T) / 2`.
pub fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    if p.nrows() == 0 {
        return 0.0;
    }
    p.clone().symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Block-diagonal replication `I_count ⊗ m`.
pub fn kron_eye(count: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(r * count, c * count);
    for k in 0..count {
        out.view_mut((k * r, k * c), (r, c)).copy_from(m);
    }
    out
}
