//! Dense row-major matrices and the handful of kernels the pipeline needs.
//!
//! Storage is `f32` by default. Every kernel widens to `f64` while it
//! accumulates and rounds once when it writes its output, so the same code
//! instantiated at `f64` is what the gradient checker evaluates.

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Default floor used by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Floating point storage type for [`Matrix`].
pub trait Scalar: Copy + Default + PartialEq + PartialOrd + Debug + Send + Sync + 'static {
    fn lift(x: f64) -> Self;
    fn widen(self) -> f64;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    #[inline]
    fn lift(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn lift(x: f64) -> Self {
        x
    }
    #[inline]
    fn widen(self) -> f64 {
        self
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`Matrix::from_vec`] but also rejects NaN and infinities.
    pub fn from_vec_finite(rows: usize, cols: usize, data: Vec<T>, what: &str) -> Result<Self> {
        check_finite(&data, what)?;
        Self::from_vec(rows, cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (i, r.len()),
                    right: (0, cols),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::lift(1.0) } else { T::default() })
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
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::default());
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Converts element type, e.g. `f32` storage to `f64` for checking.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lift(x.widen())).collect(),
        }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        check_finite(&self.data, what)
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| T::lift(f(a.widen(), b.widen())))
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| T::lift(x.widen() * c))
    }

    /// `self += other`, element-wise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = T::lift(a.widen() + b.widen());
        }
        Ok(())
    }

    /// Sum over rows, one entry per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x.widen();
            }
        }
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.widen()).sum())
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.widen() - b.widen()).abs())
            .fold(0.0, f64::max))
    }
}

pub fn check_finite<T: Scalar>(data: &[T], what: &str) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            what: what.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.widen() * y.widen()).sum()
}

pub fn norm<T: Scalar>(v: &[T]) -> f64 {
    dot(v, v).sqrt()
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for (k, &aik) in a.row(i).iter().enumerate() {
            let aik = aik.widen();
            for (o, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *o += aik * bkj.widen();
            }
        }
        for (o, &x) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = T::lift(x);
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut acc = vec![0.0f64; a.cols * b.cols];
    for r in 0..a.rows {
        for (i, &ari) in a.row(r).iter().enumerate() {
            let ari = ari.widen();
            let dst = &mut acc[i * b.cols..(i + 1) * b.cols];
            for (o, &brj) in dst.iter_mut().zip(b.row(r)) {
                *o += ari * brj.widen();
            }
        }
    }
    Matrix::from_vec(a.cols, b.cols, acc.into_iter().map(T::lift).collect())
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| T::lift(dot(a.row(i), b.row(j)))))
}

/// Token-wise affine map `x·W + b`, with `b` broadcast over rows.
pub fn affine<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Result<Matrix<T>> {
    if b.len() != w.cols {
        return Err(Error::Shape {
            op: "affine(bias)",
            left: w.shape(),
            right: (1, b.len()),
        });
    }
    let mut out = matmul(x, w)?;
    for i in 0..out.rows {
        for (o, &bj) in out.row_mut(i).iter_mut().zip(b) {
            *o = T::lift(o.widen() + bj.widen());
        }
    }
    Ok(out)
}

/// `v / max(‖v‖₂, eps)`. A zero vector maps to zero.
pub fn l2_normalize<T: Scalar>(v: &[T], eps: f64) -> Result<Vec<T>> {
    check_finite(v, "l2_normalize input")?;
    let n = norm(v).max(eps);
    Ok(v.iter().map(|&x| T::lift(x.widen() / n)).collect())
}

/// Backward of [`l2_normalize`]: maps `dL/dy` to `dL/dv`.
pub fn l2_normalize_backward<T: Scalar>(v: &[T], dy: &[T], eps: f64) -> Vec<T> {
    let n = norm(v);
    if n <= eps {
        return dy.iter().map(|&g| T::lift(g.widen() / eps)).collect();
    }
    // y = v / n, dv = (dy - y (y·dy)) / n
    let ydy: f64 = v.iter().zip(dy).map(|(a, b)| a.widen() * b.widen()).sum::<f64>() / n;
    v.iter()
        .zip(dy)
        .map(|(&a, &g)| T::lift((g.widen() - a.widen() / n * ydy) / n))
        .collect()
}

/// Normalizes every row of `m` to unit length in place.
pub fn normalize_rows<T: Scalar>(m: &mut Matrix<T>) {
    for i in 0..m.rows {
        let row = m.row_mut(i);
        let n = norm(row).max(NORM_EPS);
        row.iter_mut().for_each(|x| *x = T::lift(x.widen() / n));
    }
}

/// Column-wise softmax: each column of the `M×S` score matrix becomes a
/// distribution over the `M` rows.
pub fn softmax_columns<T: Scalar>(scores: &Matrix<T>) -> Result<Matrix<T>> {
    scores.check_finite("softmax scores")?;
    let (m, s) = scores.shape();
    let mut out = Matrix::zeros(m, s);
    let mut col = vec![0.0f64; m];
    for k in 0..s {
        let mut max = f64::NEG_INFINITY;
        for (j, c) in col.iter_mut().enumerate() {
            *c = scores.get(j, k).widen();
            max = max.max(*c);
        }
        let mut total = 0.0;
        for c in col.iter_mut() {
            *c = (*c - max).exp();
            total += *c;
        }
        for (j, c) in col.iter().enumerate() {
            out.set(j, k, T::lift(c / total));
        }
    }
    Ok(out)
}

/// Backward of [`softmax_columns`] given its output `alpha`.
pub fn softmax_columns_backward<T: Scalar>(alpha: &Matrix<T>, d_alpha: &Matrix<T>) -> Matrix<T> {
    let (m, s) = alpha.shape();
    let mut out = Matrix::zeros(m, s);
    for k in 0..s {
        let inner: f64 = (0..m)
            .map(|j| alpha.get(j, k).widen() * d_alpha.get(j, k).widen())
            .sum();
        for j in 0..m {
            let a = alpha.get(j, k).widen();
            out.set(j, k, T::lift(a * (d_alpha.get(j, k).widen() - inner)));
        }
    }
    out
}

/// A trainable tensor together with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub lr_multiplier: f64,
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            lr_multiplier: 1.0,
            decay: true,
        }
    }

    pub fn without_decay(mut self) -> Self {
        self.decay = false;
        self
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn accumulate(&mut self, g: &Matrix) -> Result<()> {
        self.grad.add_assign(g)
    }
}
