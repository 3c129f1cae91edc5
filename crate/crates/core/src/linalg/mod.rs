//! Dense row-major matrices, products, SVD and rank truncation.

pub(crate) mod kernels;
mod svd;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use svd::{svd, truncate, SvdResult};

/// A dense real matrix stored row-major: `data[i * cols + j]` is entry `(i, j)`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}×{}) [", self.rows, self.cols)?;
        for i in 0..self.rows.min(6) {
            write!(f, "\n  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "\n]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting empty shapes, length
    /// mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("Matrix::new", format!("{rows}×{cols} is empty")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}×{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec_unchecked(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Square diagonal matrix.
    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// # Panics
    /// Panics on ragged or empty input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty(), "empty matrix");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec_unchecked(rows.len(), cols, data)
    }

    /// Entries drawn i.i.d. from `scale · N(0, 1)`.
    ///
    /// The generator is ChaCha8 seeded through `seed_from_u64(seed)` with
    /// standard normals from `rand_distr::StandardNormal`, filled row-major,
    /// so a fixed seed reproduces the matrix bit for bit.
    pub fn seeded_random(rows: usize, cols: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(rows, cols, &mut rng, scale)
    }

    pub(crate) fn random_with(rows: usize, cols: usize, rng: &mut impl rand::Rng, scale: f64) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect();
        Self::from_vec_unchecked(rows, cols, data)
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Copy of the first `r` columns.
    pub fn leading_columns(&self, r: usize) -> Matrix {
        assert!(r >= 1 && r <= self.cols);
        let mut out = Matrix::zeros(self.rows, r);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[..r]);
        }
        out
    }

    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}×{} · {}×{}", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        let mut c = Matrix::zeros(self.rows, b.cols);
        kernels::mm_nn(
            &self.data,
            self.cols,
            &b.data,
            b.cols,
            &mut c.data,
            b.cols,
            self.rows,
            self.cols,
            b.cols,
        );
        Ok(c)
    }

    /// `self · bᵀ`.
    pub fn matmul_t(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{}×{} · ({}×{})ᵀ", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        let mut c = Matrix::zeros(self.rows, b.rows);
        kernels::mm_nt(
            &self.data,
            self.cols,
            &b.data,
            b.cols,
            &mut c.data,
            b.rows,
            self.rows,
            self.cols,
            b.rows,
        );
        Ok(c)
    }

    /// `selfᵀ · b`.
    pub fn t_matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.rows != b.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("({}×{})ᵀ · {}×{}", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        let mut c = Matrix::zeros(self.cols, b.cols);
        kernels::mm_tn(
            &self.data,
            self.cols,
            &b.data,
            b.cols,
            &mut c.data,
            b.cols,
            self.cols,
            self.rows,
            b.cols,
        );
        Ok(c)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Read-only view of the first `r` columns, aliasing this matrix's storage.
    pub fn prefix(&self, r: usize) -> ColumnPrefix<'_> {
        assert!(r >= 1 && r <= self.cols, "prefix {r} of {} columns", self.cols);
        ColumnPrefix {
            data: &self.data,
            rows: self.rows,
            stride: self.cols,
            cols: r,
        }
    }

    /// Mutable view of the first `r` columns.
    pub fn prefix_mut(&mut self, r: usize) -> ColumnPrefixMut<'_> {
        assert!(r >= 1 && r <= self.cols, "prefix {r} of {} columns", self.cols);
        ColumnPrefixMut {
            rows: self.rows,
            stride: self.cols,
            cols: r,
            data: &mut self.data,
        }
    }
}

/// The leading `cols` columns of a wider row-major buffer. No data is copied;
/// entry `(i, j)` lives at `data[i * stride + j]`.
#[derive(Debug, Clone, Copy)]
pub struct ColumnPrefix<'a> {
    data: &'a [f64],
    rows: usize,
    stride: usize,
    cols: usize,
}

impl<'a> ColumnPrefix<'a> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(j < self.cols);
        self.data[i * self.stride + j]
    }

    pub(crate) fn raw(&self) -> &'a [f64] {
        self.data
    }

    /// Whether this view and `other` read the same underlying buffer.
    pub fn shares_storage_with(&self, other: &ColumnPrefix<'_>) -> bool {
        std::ptr::eq(self.data.as_ptr(), other.data.as_ptr())
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.data[i * self.stride..i * self.stride + self.cols]);
        }
        out
    }
}

/// Mutable counterpart of [`ColumnPrefix`]; writes land in the parent buffer.
#[derive(Debug)]
pub struct ColumnPrefixMut<'a> {
    data: &'a mut [f64],
    rows: usize,
    stride: usize,
    cols: usize,
}

impl ColumnPrefixMut<'_> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(j < self.cols, "column {j} outside prefix of {}", self.cols);
        self.data[i * self.stride + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(j < self.cols, "column {j} outside prefix of {}", self.cols);
        self.data[i * self.stride + j] = v;
    }

    pub fn as_ref(&self) -> ColumnPrefix<'_> {
        ColumnPrefix {
            data: self.data,
            rows: self.rows,
            stride: self.stride,
            cols: self.cols,
        }
    }
}

/// Free-function form of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn transpose(a: &Matrix) -> Matrix {
    a.transpose()
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.frobenius_norm()
}

pub fn seeded_random(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
    Matrix::seeded_random(rows, cols, seed, scale)
}
