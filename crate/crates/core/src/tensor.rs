//! Dense row-major `f64` tensors and the handful of kernels the model needs.
//!
//! Summation order is fixed (left to right over the reduced index) so that
//! results can be compared bit-for-bit against naive loop references.

use crate::error::{ensure, Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            Shape,
            "shape {:?} needs {} values, got {}",
            shape,
            numel,
            data.len()
        );
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None, requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None, requires_grad: false }
    }

    /// 2-D convenience constructor.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(rows.iter().all(|r| r.len() == cols), Shape, "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal() * std).collect();
        Tensor { shape, data, grad: None, requires_grad: false }
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

    /// Rows when viewed as a matrix: every axis but the last.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(numel == self.data.len(), Shape, "cannot reshape {:?} into {:?}", self.shape, shape);
        self.shape = shape;
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        ensure!(grad.len() == self.data.len(), Shape, "gradient length {} != {}", grad.len(), self.data.len());
        self.grad = Some(grad);
        Ok(())
    }

    pub fn accumulate_grad(&mut self, grad: &[f64]) -> Result<()> {
        ensure!(grad.len() == self.data.len(), Shape, "gradient length {} != {}", grad.len(), self.data.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => self.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        ensure!(
            self.shape.len() == 2 && other.shape.len() == 2 && self.shape[1] == other.shape[0],
            Shape,
            "matmul of {:?} and {:?}",
            self.shape,
            other.shape
        );
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let out = gemm(&self.data, &other.data, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        ensure!(self.shape.len() == 2, Shape, "transpose needs a matrix, got {:?}", self.shape);
        let (m, n) = (self.shape[0], self.shape[1]);
        Tensor::new(vec![n, m], transpose(&self.data, m, n))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// `a[m×k] · b[k×n]`, accumulating over `k` in increasing order.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn gemm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn gemm_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, av) in arow.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// One entry of an additive attention mask: `0` or the `−∞` sentinel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskEntry {
    Open,
    Blocked,
}

/// Additive mask over `rows × cols` logits. A single-row mask broadcasts over
/// every logit row.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveMask {
    rows: usize,
    cols: usize,
    entries: Vec<MaskEntry>,
}

impl AdditiveMask {
    pub fn new(rows: usize, cols: usize, entries: Vec<MaskEntry>) -> Result<Self> {
        ensure!(entries.len() == rows * cols, Shape, "mask {}×{} given {} entries", rows, cols, entries.len());
        Ok(AdditiveMask { rows, cols, entries })
    }

    pub fn open(rows: usize, cols: usize) -> Self {
        AdditiveMask { rows, cols, entries: vec![MaskEntry::Open; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> MaskEntry {
        let r = if self.rows == 1 { 0 } else { row };
        self.entries[r * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, entry: MaskEntry) {
        self.entries[row * self.cols + col] = entry;
    }

    pub fn row(&self, row: usize) -> &[MaskEntry] {
        let r = if self.rows == 1 { 0 } else { row };
        &self.entries[r * self.cols..(r + 1) * self.cols]
    }

    /// The additive value as an `f64` (for display and reference code only).
    pub fn value(&self, row: usize, col: usize) -> f64 {
        match self.get(row, col) {
            MaskEntry::Open => 0.0,
            MaskEntry::Blocked => f64::NEG_INFINITY,
        }
    }

    pub(crate) fn check_against(&self, rows: usize, cols: usize) -> Result<()> {
        ensure!(
            self.cols == cols && (self.rows == 1 || self.rows == rows),
            Shape,
            "mask {}×{} does not broadcast to logits {}×{}",
            self.rows,
            self.cols,
            rows,
            cols
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxOutput {
    pub probs: Tensor,
    /// Rows whose every entry was blocked; they come back as all zeros.
    pub degenerate_rows: Vec<usize>,
}

impl SoftmaxOutput {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_rows.is_empty()
    }
}

/// Row-wise softmax in place over a `rows × cols` buffer. Blocked entries get
/// exactly `0.0` and never pass through `exp`. Returns the degenerate rows.
pub(crate) fn softmax_rows_in_place(
    data: &mut [f64],
    rows: usize,
    cols: usize,
    mask: Option<&AdditiveMask>,
) -> Vec<usize> {
    let mut degenerate = Vec::new();
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let mrow = mask.map(|m| m.row(r));
        let open = |j: usize| mrow.is_none_or(|m| m[j] == MaskEntry::Open);
        let mut max = f64::NEG_INFINITY;
        for (j, v) in row.iter().enumerate() {
            if open(j) && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            degenerate.push(r);
            continue;
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if open(j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    degenerate
}

/// Softmax along the last axis after adding `mask`.
pub fn masked_softmax(logits: &Tensor, mask: Option<&AdditiveMask>) -> Result<SoftmaxOutput> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if let Some(m) = mask {
        m.check_against(rows, cols)?;
    }
    let mut data = logits.data.clone();
    let degenerate_rows = softmax_rows_in_place(&mut data, rows, cols, mask);
    let probs = Tensor::new(logits.shape.clone(), data)?;
    probs.check_finite("masked_softmax")?;
    Ok(SoftmaxOutput { probs, degenerate_rows })
}
