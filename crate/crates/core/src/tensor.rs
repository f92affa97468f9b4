//! Dense `f64` tensors and probability batches.
//!
//! [`Tensor`] is a plain row-major value type. Differentiable computation
//! happens on a [`crate::autodiff::Tape`]; the functions here are the
//! value-level counterparts used by diagnostics and evaluation.

use crate::error::{Error, Result};

/// Floor applied to every probability before a logarithm is taken.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on row sums accepted by [`ProbBatch`].
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::matrix(n, c, rows.concat())
    }

    /// One row per sample, `classes` columns.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let mut data = vec![0.0; labels.len() * classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Contract(format!(
                    "label {y} out of range for {classes} classes"
                )));
            }
            data[i * classes + y] = 1.0;
        }
        Tensor::matrix(labels.len(), classes, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` view: rank-1 tensors are one row, scalars are 1×1.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (_, c) = self.dims2();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), c, data)
    }

    /// Per-row argmax; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A batch of probability vectors, one per row.
///
/// Entries are clamped from below at [`PROB_FLOOR`]; rows sum to one within
/// [`SIMPLEX_TOL`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbBatch {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ProbBatch {
    pub fn new(rows: usize, cols: usize, mut values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() || cols == 0 {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} probability batch with {} values",
                values.len()
            )));
        }
        for (i, row) in values.chunks_mut(cols).enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) {
                return Err(Error::Numeric(format!("row {i} is not a distribution")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Numeric(format!("row {i} sums to {sum}")));
            }
            for v in row.iter_mut() {
                *v = v.clamp(PROB_FLOOR, 1.0);
            }
        }
        Ok(ProbBatch { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = Tensor::from_rows(rows)?;
        let (r, c) = t.dims2();
        ProbBatch::new(r, c, t.into_data())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (r, c) = t.dims2();
        ProbBatch::new(r, c, t.data().to_vec())
    }

    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let t = Tensor::one_hot(labels, classes)?;
        ProbBatch::new(labels.len(), classes, t.into_data())
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        ProbBatch {
            rows,
            cols,
            values: vec![1.0 / cols as f64; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.rows, self.cols],
            data: self.values.clone(),
        }
    }

    /// Log-probabilities, usable as logits.
    pub fn log_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.rows, self.cols],
            data: self.values.iter().map(|p| p.max(PROB_FLOOR).ln()).collect(),
        }
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        self.to_tensor().argmax_rows()
    }

    fn check_same(&self, other: &ProbBatch) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Numerically stable softmax of one row into `out`.
pub(crate) fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Numerically stable log-softmax of one row into `out`.
pub(crate) fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

/// Row-wise softmax of a logit matrix.
pub fn softmax(z: &Tensor) -> Result<ProbBatch> {
    if !z.all_finite() {
        return Err(Error::Numeric("softmax of non-finite logits".into()));
    }
    let (r, c) = z.dims2();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        softmax_row(z.row(i), &mut out[i * c..(i + 1) * c]);
    }
    ProbBatch::new(r, c, out)
}

/// Per-row `KL(p ‖ q)` with clamped logarithms.
pub fn kl_divergence(p: &ProbBatch, q: &ProbBatch) -> Result<Vec<f64>> {
    p.check_same(q)?;
    Ok((0..p.rows).map(|i| kl_row(p.row(i), q.row(i))).collect())
}

pub(crate) fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum();
    kl.max(0.0)
}

pub(crate) fn entropy_row(p: &[f64]) -> f64 {
    let h: f64 = -p
        .iter()
        .map(|&pi| pi * pi.max(PROB_FLOOR).ln())
        .sum::<f64>();
    h.max(0.0)
}

/// Per-row Shannon entropy in nats.
pub fn entropy(p: &ProbBatch) -> Vec<f64> {
    (0..p.rows).map(|i| entropy_row(p.row(i))).collect()
}

/// Per-row cross-entropy `−Σ target · log_softmax(logits)`.
pub fn cross_entropy(target: &ProbBatch, logits: &Tensor) -> Result<Vec<f64>> {
    let (r, c) = logits.dims2();
    if r != target.rows || c != target.cols {
        return Err(Error::Dimension(format!(
            "target {}x{} vs logits {r}x{c}",
            target.rows, target.cols
        )));
    }
    let mut ls = vec![0.0; c];
    Ok((0..r)
        .map(|i| {
            log_softmax_row(logits.row(i), &mut ls);
            -target
                .row(i)
                .iter()
                .zip(&ls)
                .map(|(t, l)| t * l)
                .sum::<f64>()
        })
        .collect())
}
