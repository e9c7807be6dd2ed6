//! Dense row-major `f32` matrices and the handful of kernels the model needs.
//!
//! Matrix products go through `matrixmultiply::sgemm`, whose blocking is a
//! pure function of the operand shapes, so repeated runs on the same machine
//! produce bit-identical results.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(shape_err("from_vec", format!("non-finite value at flat index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn row_vector(values: &[f32]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Self {
        let mut out = Self::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += alpha * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor2D, alpha: f32) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "add_scaled",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

fn operand_dims(t: &Tensor2D, tr: Transpose) -> (usize, usize, isize, isize) {
    // (rows, cols, row stride, col stride) of the logical operand
    match tr {
        Transpose::No => (t.rows, t.cols, t.cols as isize, 1),
        Transpose::Yes => (t.cols, t.rows, 1, t.cols as isize),
    }
}

/// `out = alpha * op(a) · op(b) + beta * out`.
pub fn gemm_into(
    alpha: f32,
    a: &Tensor2D,
    ta: Transpose,
    b: &Tensor2D,
    tb: Transpose,
    beta: f32,
    out: &mut Tensor2D,
) -> Result<()> {
    let (m, k, rsa, csa) = operand_dims(a, ta);
    let (k2, n, rsb, csb) = operand_dims(b, tb);
    if k != k2 || out.rows != m || out.cols != n {
        return Err(shape_err(
            "matmul",
            format!("[{m}x{k}] · [{k2}x{n}] -> [{}x{}]", out.rows, out.cols),
        ));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        out.data.iter_mut().for_each(|v| *v *= beta);
        return Ok(());
    }
    // SAFETY: pointers and strides describe the full extents of `a`, `b` and
    // `out`, which were checked against (m, k, n) above; `out` is uniquely
    // borrowed and does not alias the inputs.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

pub fn gemm(a: &Tensor2D, ta: Transpose, b: &Tensor2D, tb: Transpose) -> Result<Tensor2D> {
    let m = operand_dims(a, ta).0;
    let n = operand_dims(b, tb).1;
    let mut out = Tensor2D::zeros(m, n);
    gemm_into(1.0, a, ta, b, tb, 0.0, &mut out)?;
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "matmul" });
    }
    Ok(out)
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(shape_err(
            "matmul",
            format!("a is {}x{}, b is {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    gemm(a, Transpose::No, b, Transpose::No)
}

/// Boolean mask for [`softmax_rows`]; `true` marks an entry that may receive
/// probability mass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(shape_err("mask", "length does not match shape"));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    /// Lower-triangular mask: row `i` may see columns `0..=i`.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            allowed[i * n..i * n + i + 1].fill(true);
        }
        Self {
            rows: n,
            cols: n,
            allowed,
        }
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

/// Softmax of a single slice in place, with max subtraction. Entries with
/// `allowed == false` become exactly zero.
pub(crate) fn softmax_in_place(row: &mut [f32], allowed: impl Fn(usize) -> bool) -> bool {
    let mut max = f32::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f32::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0f64;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v as f64;
        } else {
            *v = 0.0;
        }
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
    true
}

pub fn softmax_rows(m: &Tensor2D, mask: Option<&Mask>) -> Result<Tensor2D> {
    if let Some(mask) = mask {
        if (mask.rows, mask.cols) != m.shape() {
            return Err(shape_err(
                "softmax_rows",
                format!("mask {}x{} vs matrix {:?}", mask.rows, mask.cols, m.shape()),
            ));
        }
    }
    let mut out = m.clone();
    for r in 0..m.rows {
        let ok = match mask {
            Some(mask) => softmax_in_place(out.row_mut(r), |c| mask.allowed(r, c)),
            None => softmax_in_place(out.row_mut(r), |_| true),
        };
        if !ok {
            return Err(Error::DegenerateRow { row: r });
        }
    }
    Ok(out)
}

/// Euclidean norm, accumulated in `f64`.
pub fn l2_norm(v: &[f32]) -> f32 {
    v.iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt() as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    Normal { std: f32 },
    Zeros,
    Constant { value: f32 },
}

/// Deterministic initialisation. The normal scheme fills the matrix in
/// row-major order with successive Box–Muller deviates from a splitmix64
/// stream seeded with `seed`, each scaled by `std`.
pub fn seeded_init(rows: usize, cols: usize, scheme: InitScheme, seed: u64) -> Result<Tensor2D> {
    match scheme {
        InitScheme::Zeros => Ok(Tensor2D::zeros(rows, cols)),
        InitScheme::Constant { value } => {
            if !value.is_finite() {
                return Err(Error::Config("non-finite constant init".into()));
            }
            Ok(Tensor2D::filled(rows, cols, value))
        }
        InitScheme::Normal { std } => {
            if !(std > 0.0 && std.is_finite()) {
                return Err(Error::Config(format!("normal init needs std > 0, got {std}")));
            }
            let mut rng = SplitMix64::new(seed);
            let data = (0..rows * cols)
                .map(|_| (rng.next_normal() * std as f64) as f32)
                .collect();
            Ok(Tensor2D { rows, cols, data })
        }
    }
}
