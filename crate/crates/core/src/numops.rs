//! Row-wise numerical kernels: wide depthwise convolution, ReLU and
//! ceil-length max pooling, each with an exact backward pass, plus a
//! central-difference gradient checker.
//!
//! Convolution follows the windowed dot-product convention
//! `c_j = f · s[j-m+1 ..= j] + b` for `j = 1 ..= L+m-1` (1-based), with `s`
//! zero outside `1 ..= L`. Filter entry `f[0]` therefore multiplies the
//! oldest sample of the window. Filters serialized by this crate assume that
//! convention.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite function value {value} at coordinate {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if rows * cols != data.len() {
            return Err(NumError::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumError::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<(), NumError> {
        if self.shape() != other.shape() {
            return Err(NumError::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// One length-`m` filter and one bias per indicator row.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub filters: Matrix,
    pub biases: Vec<f64>,
}

impl FilterBank {
    pub fn new(filters: Matrix, biases: Vec<f64>) -> Result<Self, NumError> {
        if filters.rows() != biases.len() {
            return Err(NumError::Shape(format!(
                "{} filters but {} biases",
                filters.rows(),
                biases.len()
            )));
        }
        if filters.cols() == 0 {
            return Err(NumError::Invalid("filter length must be at least 1".into()));
        }
        Ok(Self { filters, biases })
    }

    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            filters: Matrix::zeros(d, m),
            biases: vec![0.0; d],
        }
    }

    pub fn filter_len(&self) -> usize {
        self.filters.cols()
    }
}

/// Length of a wide convolution output.
pub fn wide_len(input_len: usize, filter_len: usize) -> usize {
    input_len + filter_len - 1
}

/// Length of a ceil-window pooling output.
pub fn pooled_len(input_len: usize, pool: usize) -> usize {
    input_len.div_ceil(pool)
}

/// `out[j] += Σ_t f[t]·s[j-(m-1)+t]`, `out` of length `L+m-1`. No bias.
#[inline]
pub(crate) fn conv_row_accumulate(s: &[f64], f: &[f64], out: &mut [f64]) {
    let m = f.len();
    debug_assert_eq!(out.len(), s.len() + m - 1);
    for (t, &ft) in f.iter().enumerate() {
        if ft == 0.0 {
            continue;
        }
        let shift = m - 1 - t;
        for (o, &si) in out[shift..shift + s.len()].iter_mut().zip(s) {
            *o += ft * si;
        }
    }
}

/// Backward of [`conv_row_accumulate`]: accumulates into `grad_s` and `grad_f`.
#[inline]
pub(crate) fn conv_row_backward_accumulate(
    s: &[f64],
    f: &[f64],
    upstream: &[f64],
    grad_s: Option<&mut [f64]>,
    grad_f: &mut [f64],
) {
    let m = f.len();
    let l = s.len();
    for (t, gf) in grad_f.iter_mut().enumerate() {
        let shift = m - 1 - t;
        let window = &upstream[shift..shift + l];
        *gf += s.iter().zip(window).map(|(a, b)| a * b).sum::<f64>();
    }
    if let Some(grad_s) = grad_s {
        for (t, &ft) in f.iter().enumerate() {
            let shift = m - 1 - t;
            for (g, &u) in grad_s.iter_mut().zip(&upstream[shift..shift + l]) {
                *g += ft * u;
            }
        }
    }
}

/// Wide 1-D convolution of one sequence with one filter plus bias.
pub fn wide_conv_row(s: &[f64], f: &[f64], bias: f64) -> Result<Vec<f64>, NumError> {
    if s.is_empty() || f.is_empty() {
        return Err(NumError::Shape(format!(
            "sequence length {} and filter length {} must both be >= 1",
            s.len(),
            f.len()
        )));
    }
    let mut out = vec![bias; wide_len(s.len(), f.len())];
    conv_row_accumulate(s, f, &mut out);
    Ok(out)
}

/// Depthwise convolution: row `r` of `input` with filter `r` and bias `r`.
pub fn conv_bank(input: &Matrix, bank: &FilterBank) -> Result<Matrix, NumError> {
    check_bank(input, bank)?;
    let m = bank.filter_len();
    let mut out = Matrix::zeros(input.rows(), wide_len(input.cols(), m));
    conv_bank_accumulate(input, bank.filters.as_slice(), m, &bank.biases, &mut out);
    Ok(out)
}

fn check_bank(input: &Matrix, bank: &FilterBank) -> Result<(), NumError> {
    if input.rows() != bank.filters.rows() || bank.biases.len() != input.rows() {
        return Err(NumError::Shape(format!(
            "input has {} rows, filter bank has {}",
            input.rows(),
            bank.filters.rows()
        )));
    }
    if input.cols() == 0 {
        return Err(NumError::Shape("input has no columns".into()));
    }
    Ok(())
}

/// Slice-level depthwise convolution adding into `out` (bias included).
/// `filters` is `d×m` row-major.
pub(crate) fn conv_bank_accumulate(
    input: &Matrix,
    filters: &[f64],
    m: usize,
    biases: &[f64],
    out: &mut Matrix,
) {
    for r in 0..input.rows() {
        let row = out.row_mut(r);
        let b = biases[r];
        if b != 0.0 {
            row.iter_mut().for_each(|v| *v += b);
        }
        conv_row_accumulate(input.row(r), &filters[r * m..(r + 1) * m], row);
    }
}

/// Gradients of a depthwise convolution contracted with `upstream`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Matrix,
    pub filters: Matrix,
    pub biases: Vec<f64>,
}

pub fn conv_bank_backward(
    input: &Matrix,
    bank: &FilterBank,
    upstream: &Matrix,
) -> Result<ConvGrads, NumError> {
    check_bank(input, bank)?;
    let m = bank.filter_len();
    let expected = (input.rows(), wide_len(input.cols(), m));
    if upstream.shape() != expected {
        return Err(NumError::Shape(format!(
            "upstream gradient is {:?}, expected {:?}",
            upstream.shape(),
            expected
        )));
    }
    let mut grads = ConvGrads {
        input: Matrix::zeros(input.rows(), input.cols()),
        filters: Matrix::zeros(input.rows(), m),
        biases: vec![0.0; input.rows()],
    };
    conv_bank_backward_accumulate(
        input,
        bank.filters.as_slice(),
        m,
        upstream,
        Some(&mut grads.input),
        grads.filters.as_mut_slice(),
        &mut grads.biases,
    );
    Ok(grads)
}

pub(crate) fn conv_bank_backward_accumulate(
    input: &Matrix,
    filters: &[f64],
    m: usize,
    upstream: &Matrix,
    mut grad_input: Option<&mut Matrix>,
    grad_filters: &mut [f64],
    grad_biases: &mut [f64],
) {
    for r in 0..input.rows() {
        let up = upstream.row(r);
        grad_biases[r] += up.iter().sum::<f64>();
        conv_row_backward_accumulate(
            input.row(r),
            &filters[r * m..(r + 1) * m],
            up,
            grad_input.as_deref_mut().map(|g| g.row_mut(r)),
            &mut grad_filters[r * m..(r + 1) * m],
        );
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Passes `upstream` where `x > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Matrix, upstream: &Matrix) -> Result<Matrix, NumError> {
    if x.shape() != upstream.shape() {
        return Err(NumError::Shape(format!(
            "activation {:?} vs upstream {:?}",
            x.shape(),
            upstream.shape()
        )));
    }
    let data = x
        .as_slice()
        .iter()
        .zip(upstream.as_slice())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// Row max pooling over consecutive windows of `pool` entries; the last
/// window may be partial. Returns the pooled matrix and, per output entry,
/// the column of the winning input (lowest index on ties).
pub(crate) fn maxpool_with_argmax(a: &Matrix, pool: usize) -> (Matrix, Vec<usize>) {
    let out_cols = pooled_len(a.cols(), pool);
    let mut out = Matrix::zeros(a.rows(), out_cols);
    let mut arg = Vec::with_capacity(a.rows() * out_cols);
    for r in 0..a.rows() {
        let row = a.row(r);
        let out_row = out.row_mut(r);
        for (j, chunk) in row.chunks(pool).enumerate() {
            let mut best = 0;
            for (i, &v) in chunk.iter().enumerate().skip(1) {
                if v > chunk[best] {
                    best = i;
                }
            }
            out_row[j] = chunk[best];
            arg.push(j * pool + best);
        }
    }
    (out, arg)
}

pub fn maxpool_rows(a: &Matrix, pool: usize) -> Result<Matrix, NumError> {
    if pool == 0 {
        return Err(NumError::Invalid("pool length must be at least 1".into()));
    }
    Ok(maxpool_with_argmax(a, pool).0)
}

/// Routes each pooled gradient to the arg-max of its window.
pub fn maxpool_backward(a: &Matrix, pool: usize, upstream: &Matrix) -> Result<Matrix, NumError> {
    if pool == 0 {
        return Err(NumError::Invalid("pool length must be at least 1".into()));
    }
    let expected = (a.rows(), pooled_len(a.cols(), pool));
    if upstream.shape() != expected {
        return Err(NumError::Shape(format!(
            "upstream gradient is {:?}, expected {:?}",
            upstream.shape(),
            expected
        )));
    }
    let (_, arg) = maxpool_with_argmax(a, pool);
    let mut grad = Matrix::zeros(a.rows(), a.cols());
    scatter_pool_grad(&arg, upstream, &mut grad);
    Ok(grad)
}

pub(crate) fn scatter_pool_grad(arg: &[usize], upstream: &Matrix, grad: &mut Matrix) {
    let out_cols = upstream.cols();
    for r in 0..upstream.rows() {
        let up = upstream.row(r);
        let g = grad.row_mut(r);
        for (j, &u) in up.iter().enumerate() {
            g[arg[r * out_cols + j]] += u;
        }
    }
}

/// Relative error used by every gradient check in this crate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Central-difference gradient of `f` at `point`, one coordinate at a time.
pub fn numeric_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    h: f64,
) -> Result<Vec<f64>, NumError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(NumError::Invalid(format!("step must be positive, got {h}")));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(NumError::NonFinite { index: i, value });
            }
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Compares `analytic` against central differences of `f` and returns the
/// largest relative error `|a-n| / max(1e-12, |a|+|n|)`.
pub fn finite_diff_check(
    f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<f64, NumError> {
    if analytic.len() != point.len() {
        return Err(NumError::Shape(format!(
            "{} analytic entries for {} coordinates",
            analytic.len(),
            point.len()
        )));
    }
    let numeric = numeric_gradient(f, point, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
