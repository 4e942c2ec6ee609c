//! Dense row-major f64 matrices.
//!
//! The whole crate runs at desk scale (minibatches of 64, feature counts in
//! the hundreds), so storage is a flat `Vec<f64>` and all kernels are plain
//! loops. Shape errors are reported through [`crate::Error::ShapeMismatch`]
//! naming both operand shapes.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major matrix. `data.len() == rows * cols` always holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: (a.rows, a.cols),
        rhs: (b.rows, b.cols),
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data. Errors if the length is not
    /// `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Errors on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Config(format!(
                    "ragged rows: row 0 has {} entries, row {} has {}",
                    cols,
                    i,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Matrix {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err("matmul", self, other));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in arow.iter().enumerate() {
                let brow = &other.data[k * n..(k + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn zip(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self, other));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "mul", |a, b| a * b)
    }

    /// Adds a 1 x cols row vector to every row.
    pub fn add_row_broadcast(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(shape_err("add_row", self, row));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn concat_cols(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_err("concat_cols", self, other));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Copies columns `[start, start + len)` into a new matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols {
            return Err(Error::Config(format!(
                "slice_cols [{start}, {}) out of range for {} columns",
                start + len,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(Matrix {
            rows: self.rows,
            cols: len,
            data,
        })
    }

    /// Copies rows `[start, start + len)` into a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.rows {
            return Err(Error::Config(format!(
                "slice_rows [{start}, {}) out of range for {} rows",
                start + len,
                self.rows
            )));
        }
        Ok(Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    /// Gathers the given columns, in order, allowing repeats.
    pub fn gather_cols(&self, idx: &[usize]) -> Result<Matrix> {
        for &j in idx {
            if j >= self.cols {
                return Err(Error::Config(format!(
                    "column index {j} out of range for {} columns",
                    self.cols
                )));
            }
        }
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for i in 0..self.rows {
            let r = self.row(i);
            data.extend(idx.iter().map(|&j| r[j]));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: idx.len(),
            data,
        })
    }

    /// Gathers the given rows, in order, allowing repeats.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::Config(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    /// Column sums as a 1 x cols row vector.
    ///
    /// Each column is accumulated in sorted value order, so the result is
    /// bitwise invariant under any permutation of the input rows. Errors on
    /// an empty matrix.
    pub fn sum_rows(&self) -> Result<Matrix> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(format!(
                "sum_rows on empty {}x{} matrix",
                self.rows, self.cols
            )));
        }
        let mut out = Matrix::zeros(1, self.cols);
        let mut col = vec![0.0; self.rows];
        for j in 0..self.cols {
            for i in 0..self.rows {
                col[i] = self.data[i * self.cols + j];
            }
            col.sort_unstable_by(f64::total_cmp);
            out.data[j] = col.iter().sum();
        }
        Ok(out)
    }

    /// Repeats a 1 x cols row vector into n identical rows.
    pub fn repeat_rows(&self, n: usize) -> Result<Matrix> {
        if self.rows != 1 {
            return Err(Error::Config(format!(
                "repeat_rows needs a row vector, got {}x{}",
                self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(n * self.cols);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Ok(Matrix {
            rows: n,
            cols: self.cols,
            data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_known_product() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Matrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 7 + j) as f64);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn concat_then_slice_recovers_operands() {
        let a = Matrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let b = Matrix::from_fn(2, 2, |i, j| (10 + i * j) as f64);
        let c = a.concat_cols(&b).unwrap();
        assert_eq!(c.slice_cols(0, 3).unwrap(), a);
        assert_eq!(c.slice_cols(3, 2).unwrap(), b);
    }

    #[test]
    fn sum_rows_is_permutation_invariant_bitwise() {
        let a = Matrix::from_rows(&[
            vec![0.1, 1.0e16, 7.7],
            vec![0.2, -3.0, 1.1e-8],
            vec![-0.30000000000004, 2.5, 4.0],
            vec![1e-30, 1.0, -9.0],
        ])
        .unwrap();
        let perm = a.gather_rows(&[2, 0, 3, 1]).unwrap();
        let s1 = a.sum_rows().unwrap();
        let s2 = perm.sum_rows().unwrap();
        assert_eq!(s1.data(), s2.data());
    }

    #[test]
    fn sum_rows_rejects_empty() {
        assert!(Matrix::zeros(0, 3).sum_rows().is_err());
    }

    #[test]
    fn add_row_broadcast() {
        let a = Matrix::from_fn(2, 2, |i, j| (i * 2 + j) as f64);
        let r = Matrix::row_vector(vec![10.0, 20.0]);
        let out = a.add_row_broadcast(&r).unwrap();
        assert_eq!(out.data(), &[10.0, 21.0, 12.0, 23.0]);
    }

    #[test]
    fn gather_cols_and_rows() {
        let a = Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64);
        let g = a.gather_cols(&[2, 0, 2]).unwrap();
        assert_eq!(g.row(1), &[5.0, 3.0, 5.0]);
        assert!(a.gather_cols(&[3]).is_err());
        let r = a.gather_rows(&[1, 1]).unwrap();
        assert_eq!(r.row(0), r.row(1));
    }
}
