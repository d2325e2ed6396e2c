// SPDX-License-Identifier: MIT OR Apache-2.0

//! Row-major dense `f64` matrices.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major matrix of 64-bit floats.
///
/// Vectors are represented as `1 × n` (row) or `n × 1` (column) matrices and
/// scalars as `1 × 1`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps a row-major buffer; fails if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} entries, expected {cols}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Value of a `1 × 1` matrix.
    pub fn item(&self) -> Option<f64> {
        (self.rows == 1 && self.cols == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} · {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        Ok(gemm(n, k, m, (&self.data, k, 1), (&other.data, m, 1)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_nt",
                format!(
                    "{}x{} · ({}x{})ᵀ",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.rows);
        Ok(gemm(n, k, m, (&self.data, k, 1), (&other.data, 1, k)))
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "matmul_tn",
                format!(
                    "({}x{})ᵀ · {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (k, n, m) = (self.rows, self.cols, other.cols);
        Ok(gemm(n, k, m, (&self.data, 1, n), (&other.data, m, 1)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Column sums as a `1 × cols` row.
    pub fn column_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(
                    "vstack",
                    format!("{} vs {} columns", p.cols, cols),
                ));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    /// Concatenates matrices with equal row counts horizontally.
    pub fn hstack(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |m| m.rows);
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Self::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            if p.rows != rows {
                return Err(Error::shape(
                    "hstack",
                    format!("{} vs {} rows", p.rows, rows),
                ));
            }
            for i in 0..rows {
                out.data[i * cols + offset..i * cols + offset + p.cols].copy_from_slice(p.row(i));
            }
            offset += p.cols;
        }
        Ok(out)
    }

    pub(crate) fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(())
    }
}

#[inline]
/// `n × m` product of an `n × k` and a `k × m` operand, each given as
/// `(data, row stride, column stride)`.
fn gemm(
    n: usize,
    k: usize,
    m: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(n, m);
    if n == 0 || m == 0 || k == 0 {
        return out;
    }
    debug_assert!(a.0.len() >= n * k && b.0.len() >= k * m);
    // SAFETY: the strides describe in-bounds `n × k` and `k × m` views of the
    // slices (checked by the callers' shape tests) and `out` is a fresh,
    // contiguous `n × m` buffer that aliases neither input.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            0.0,
            out.data.as_mut_ptr(),
            m as isize,
            1,
        );
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{}) [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "\n  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        if self.rows > 8 {
            write!(f, "\n  ...")?;
        }
        write!(f, "\n]")
    }
}
