//! Dense row-major 2-D arrays and the primitive kernels built on them.
//!
//! Batches follow a sentences-as-rows convention: an activation for `B`
//! sentences and `d` features is a `B x d` tensor. Weight matrices keep the
//! `out x in` orientation, so an affine map is `x · Wᵀ` ([`Tensor::matmul_nt`]).

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "tensor {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds a tensor from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[T]) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
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

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
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

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Self> {
        Self::from_vec(rows, cols, self.data.clone())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_nn(self, other, &mut out);
        Ok(out)
    }

    /// `self · otherᵀ`; the affine-map kernel for `out x in` weights.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        gemm_nt(self, other, &mut out);
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        gemm_tn_acc(self, other, &mut out);
        Ok(out)
    }

    /// Fills a tensor with i.i.d. normal draws.
    pub fn gaussian_fill(rng: &mut RngState, rows: usize, cols: usize, mean: T, std: T) -> Result<Self> {
        if std.is_nan() || std < T::zero() {
            return Err(Error::invalid(format!("gaussian_fill: std must be >= 0, got {std}")));
        }
        let data = (0..rows * cols)
            .map(|_| mean + std * T::from_f64_lossy(rng.standard_normal()))
            .collect();
        Ok(Tensor { rows, cols, data })
    }

    /// Random orthogonal `n x n` matrix: Gram-Schmidt QR of a Gaussian matrix
    /// with signs fixed by the diagonal of R. Computed in 64-bit.
    pub fn orthogonal_init(rng: &mut RngState, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("orthogonal_init: n must be >= 1"));
        }
        let q = orthonormal_columns(rng, n);
        let data = q.into_iter().map(T::from_f64_lossy).collect();
        Ok(Tensor { rows: n, cols: n, data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// Row-major `n x n` matrix with orthonormal columns.
fn orthonormal_columns(rng: &mut RngState, n: usize) -> Vec<f64> {
    // columns stored contiguously while orthogonalizing
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.standard_normal()).collect())
        .collect();
    for j in 0..n {
        let mut sign = 1.0;
        // two passes of modified Gram-Schmidt keep the result orthogonal to
        // working precision
        for pass in 0..2 {
            for k in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let qk = &done[k];
                let v = &mut rest[0];
                let d: f64 = qk.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                for (vi, qi) in v.iter_mut().zip(qk) {
                    *vi -= d * qi;
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if pass == 0 {
                // sign of R's diagonal entry
                sign = if cols[j][j] >= 0.0 { 1.0 } else { -1.0 };
            }
            for v in cols[j].iter_mut() {
                *v /= norm;
            }
        }
        for v in cols[j].iter_mut() {
            *v *= sign;
        }
    }
    let mut out = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out[i * n + j] = v;
        }
    }
    out
}

/// Numerically stable softmax of one row (max-subtracted).
pub fn softmax_row<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax_row: empty vector"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Stable `log softmax` of one row, written into `out`.
pub(crate) fn log_softmax_into<T: Scalar>(v: &[T], out: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = v.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + total.ln();
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x - lse;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = a · b` (overwrites).
pub(crate) fn gemm_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out: &mut Tensor<T>) {
    let n = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * n..(i + 1) * n];
        orow.iter_mut().for_each(|v| *v = T::zero());
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != T::zero() {
                axpy(aik, b.row(k), orow);
            }
        }
    }
}

/// `out = a · bᵀ` (overwrites).
pub(crate) fn gemm_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out: &mut Tensor<T>) {
    let n = b.rows;
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..n {
            out.data[i * n + j] = dot(arow, b.row(j));
        }
    }
}

/// `out += aᵀ · b`.
pub(crate) fn gemm_tn_acc<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out: &mut Tensor<T>) {
    let n = b.cols;
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki != T::zero() {
                axpy(aki, brow, &mut out.data[i * n..(i + 1) * n]);
            }
        }
    }
}

/// `out += a · b`.
pub(crate) fn gemm_nn_acc<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out: &mut Tensor<T>) {
    let n = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != T::zero() {
                axpy(aik, b.row(k), orow);
            }
        }
    }
}

/// `out += a · bᵀ`.
pub(crate) fn gemm_nt_acc<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out: &mut Tensor<T>) {
    let n = b.rows;
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..n {
            out.data[i * n + j] += dot(arow, b.row(j));
        }
    }
}
