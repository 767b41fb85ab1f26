//! Dense n-dimensional arrays of `f64` with row-major layout.
//!
//! `Tensor` is the universal value type: graph nodes, filter states,
//! images, and parameters are all tensors. Shape extents are positive;
//! `data.len()` always equals the product of the extents.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} has a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("shapes {lhs:?} and {rhs:?} are incompatible for {op}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

/// Dense row-major array of 64-bit floats.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{:.4}, {:.4}, ... ({} values)]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product::<usize>().max(1);
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product::<usize>().max(1);
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// n-by-n identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Row-major matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar contents; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// 2-D element access.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(self.is_matrix());
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(self.is_matrix());
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn same_shape(&self, rhs: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(rhs, "add")?;
        Ok(self.zip_with(rhs, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(rhs, "sub")?;
        Ok(self.zip_with(rhs, |a, b| a - b))
    }

    pub fn mul_elem(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(rhs, "mul_elem")?;
        Ok(self.zip_with(rhs, |a, b| a * b))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// In-place `self += rhs * factor`; shapes must match.
    pub fn axpy(&mut self, factor: f64, rhs: &Tensor) {
        debug_assert_eq!(self.shape, rhs.shape);
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += factor * b;
        }
    }

    pub fn dot(&self, rhs: &Tensor) -> Result<f64, TensorError> {
        self.same_shape(rhs, "dot")?;
        Ok(self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Population variance over all elements.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64
    }

    /// Matrix product; accepts `(m,k)x(k,n) -> (m,n)` and `(m,k)x(k) -> (m)`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if !self.is_matrix() {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: "a matrix left operand",
                shape: self.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        match rhs.shape.len() {
            2 => {
                if rhs.shape[0] != k {
                    return Err(TensorError::ShapeMismatch {
                        op: "matmul",
                        lhs: self.shape.clone(),
                        rhs: rhs.shape.clone(),
                    });
                }
                let n = rhs.shape[1];
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let arow = &self.data[i * k..(i + 1) * k];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (p, &a) in arow.iter().enumerate() {
                        let brow = &rhs.data[p * n..(p + 1) * n];
                        for (o, &b) in orow.iter_mut().zip(brow) {
                            *o += a * b;
                        }
                    }
                }
                Ok(Tensor {
                    shape: vec![m, n],
                    data: out,
                })
            }
            1 => {
                if rhs.shape[0] != k {
                    return Err(TensorError::ShapeMismatch {
                        op: "matmul",
                        lhs: self.shape.clone(),
                        rhs: rhs.shape.clone(),
                    });
                }
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let arow = &self.data[i * k..(i + 1) * k];
                    out[i] = arow.iter().zip(&rhs.data).map(|(a, b)| a * b).sum();
                }
                Ok(Tensor {
                    shape: vec![m],
                    data: out,
                })
            }
            _ => Err(TensorError::RankMismatch {
                op: "matmul",
                expected: "a matrix or vector right operand",
                shape: rhs.shape.clone(),
            }),
        }
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        if !self.is_matrix() {
            return Err(TensorError::RankMismatch {
                op: "transpose",
                expected: "a matrix",
                shape: self.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Outer product of two vectors: `(m) x (n) -> (m,n)`.
    pub fn outer(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if !self.is_vector() || !rhs.is_vector() {
            return Err(TensorError::RankMismatch {
                op: "outer",
                expected: "two vectors",
                shape: self.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], rhs.shape[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = self.data[i] * rhs.data[j];
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Symmetric part `(M + M^T) / 2` of a square matrix.
    pub fn symmetrize(&self) -> Result<Tensor, TensorError> {
        let t = self.transpose()?;
        Ok(self.add(&t)?.scale(0.5))
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data.clone())
    }
}
