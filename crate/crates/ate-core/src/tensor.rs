//! Dense row-major f64 matrices.
//!
//! Everything in training is rank-2 (vectors are 1×n rows); batches of
//! sequences are packed as (batch·seq)×width with the batch/seq structure
//! carried by the ops that need it. Double precision throughout — corpus
//! files downcast to f32 on disk, never in memory.

use crate::error::{AteError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AteError::dim(
                "from_vec",
                format!("{} values for {}x{}", data.len(), rows, cols),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
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

    pub fn at(&self, r: usize, c: usize) -> f64 {
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

    /// Extracts rows `[start, start+n)` as a new tensor.
    pub fn slice_rows(&self, start: usize, n: usize) -> Tensor {
        let mut out = Tensor::zeros(n, self.cols);
        out.data
            .copy_from_slice(&self.data[start * self.cols..(start + n) * self.cols]);
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(AteError::dim(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Tensor {
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

    /// `self += c * other` without allocating.
    pub fn add_scaled_in_place(&mut self, other: &Tensor, c: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`, (m×k)·(k×n) → m×n.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(AteError::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        // i-k-j order keeps the inner loop contiguous in both B and C.
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let c_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (c, &b) in c_row.iter_mut().zip(b_row) {
                    *c += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`, (k×m)ᵀ·(k×n) → m×n. Used for weight gradients.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(AteError::dim(
                "matmul_tn",
                format!("{:?}^T x {:?}", self.shape(), other.shape()),
            ));
        }
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let c_row = &mut out.data[i * n..(i + 1) * n];
                for (c, &b) in c_row.iter_mut().zip(b_row) {
                    *c += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, (m×k)·(n×k)ᵀ → m×n. Used for input gradients.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(AteError::dim(
                "matmul_nt",
                format!("{:?} x {:?}^T", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let c_row = &mut out.data[i * n..(i + 1) * n];
            for (j, c) in c_row.iter_mut().enumerate() {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                *c = acc;
            }
        }
        Ok(out)
    }

    /// Mean over all elements.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_by_hand() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = Tensor::from_vec(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 4.0]).unwrap();
        let b = Tensor::from_vec(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let tn = a.matmul_tn(&b).unwrap();
        let explicit = a.transpose().matmul(&b).unwrap();
        assert_eq!(tn, explicit);

        let c = Tensor::from_vec(5, 4, (0..20).map(|i| (i as f64).sin()).collect()).unwrap();
        let nt = c.matmul_nt(&b).unwrap();
        let explicit = c.matmul(&b.transpose()).unwrap();
        for (x, y) in nt.data().iter().zip(explicit.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }
}
