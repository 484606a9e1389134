//! Trajectory-data algebra: block-Hankel matrices, persistency of excitation,
//! and the past/future row split used by the data-driven predictors.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for numerical rank decisions.
pub const RANK_RTOL: f64 = 1e-9;

/// A sampled vector signal `s_1, ..., s_T` with a fixed per-sample dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    samples: Vec<DVector<f64>>,
    dim: usize,
}

impl Signal {
    pub fn new(samples: Vec<DVector<f64>>) -> Result<Self> {
        let dim = samples
            .first()
            .map(|s| s.len())
            .ok_or_else(|| Error::InvalidParameter("signal must hold at least one sample".into()))?;
        if let Some((k, s)) = samples.iter().enumerate().find(|(_, s)| s.len() != dim) {
            return Err(Error::DimensionMismatch(format!("sample {k} has dimension {}, expected {dim}", s.len())));
        }
        Ok(Self { samples, dim })
    }

    /// Builds a scalar signal from plain values.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| DVector::from_element(1, v)).collect())
    }

    /// Builds a signal from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.iter().map(|r| DVector::from_column_slice(r)).collect())
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        Self { samples: vec![DVector::zeros(dim); len], dim }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub fn get(&self, k: usize) -> &DVector<f64> {
        &self.samples[k]
    }

    /// Appends a sample, checking its dimension.
    pub fn push(&mut self, sample: DVector<f64>) -> Result<()> {
        if sample.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "pushed sample has dimension {}, expected {}",
                sample.len(),
                self.dim
            )));
        }
        self.samples.push(sample);
        Ok(())
    }

    /// Samples `start..end` stacked time-major into one column vector.
    pub fn stacked(&self, start: usize, end: usize) -> DVector<f64> {
        let mut out = DVector::zeros((end - start) * self.dim);
        for (k, s) in self.samples[start..end].iter().enumerate() {
            out.rows_mut(k * self.dim, self.dim).copy_from(s);
        }
        out
    }

    /// Whole signal stacked time-major.
    pub fn to_vec(&self) -> DVector<f64> {
        self.stacked(0, self.len())
    }

    /// Keeps only the given channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Signal> {
        if let Some(&c) = channels.iter().find(|&&c| c >= self.dim) {
            return Err(Error::DimensionMismatch(format!("channel {c} out of range {}", self.dim)));
        }
        Signal::new(
            self.samples
                .iter()
                .map(|s| DVector::from_iterator(channels.len(), channels.iter().map(|&c| s[c])))
                .collect(),
        )
    }

    /// Drops the first `n` samples.
    pub fn shift(&self, n: usize) -> Result<Signal> {
        Signal::new(self.samples[n.min(self.len())..].to_vec())
    }

    /// Writes the signal as CSV with header `t,ch0,ch1,...`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim).map(|c| format!("ch{c}")).collect();
        writeln!(w, "t,{}", header.join(","))?;
        for (k, s) in self.samples.iter().enumerate() {
            let row: Vec<String> = s.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{k},{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads the CSV format produced by [`Signal::write_csv`].
    pub fn read_csv<R: Read>(r: R) -> Result<Signal> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
        if headers.get(0) != Some("t") {
            return Err(Error::Parse("signal CSV must start with a `t` column".into()));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{f}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(vals);
        }
        Signal::from_rows(&rows)
    }
}

/// Block-Hankel arrangement of a signal: block `(i, j)` holds `s_{i+j}` (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct HankelMatrix {
    pub data: DMatrix<f64>,
    pub depth: usize,
    pub block_dim: usize,
}

impl HankelMatrix {
    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    /// Block entry at block-row `i`, column `j`.
    pub fn block(&self, i: usize, j: usize) -> DVector<f64> {
        self.data.column(j).rows(i * self.block_dim, self.block_dim).into_owned()
    }
}

/// Sliding window of `depth` consecutive samples per column.
pub fn build_hankel(s: &Signal, depth: usize) -> Result<HankelMatrix> {
    let len = s.len();
    if depth == 0 {
        return Err(Error::InvalidParameter("Hankel depth must be at least 1".into()));
    }
    if depth > len {
        return Err(Error::DepthExceedsData { depth, len });
    }
    let d = s.dim();
    let cols = len - depth + 1;
    let mut data = DMatrix::zeros(d * depth, cols);
    for j in 0..cols {
        for i in 0..depth {
            data.view_mut((i * d, j), (d, 1)).copy_from(s.get(i + j));
        }
    }
    Ok(HankelMatrix { data, depth, block_dim: d })
}

/// Number of singular values above `RANK_RTOL` times the largest one.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > RANK_RTOL * smax).count()
}

/// True iff the depth-`order` Hankel matrix of `u` has full row rank.
pub fn persistently_exciting(u: &Signal, order: usize) -> Result<bool> {
    let h = build_hankel(u, order)?;
    if h.data.nrows() > h.data.ncols() {
        return Ok(false);
    }
    Ok(numerical_rank(&h.data) == h.data.nrows())
}

/// Splits a depth `t_ini + n` Hankel matrix into its past and future row blocks.
pub fn split_past_future(h: &HankelMatrix, t_ini: usize, n: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if h.depth != t_ini + n {
        return Err(Error::DepthMismatch { depth: h.depth, expected: t_ini + n });
    }
    let split = t_ini * h.block_dim;
    let past = h.data.rows(0, split).into_owned();
    let future = h.data.rows(split, h.data.nrows() - split).into_owned();
    Ok((past, future))
}
