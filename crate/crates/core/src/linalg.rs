//! Small dense linear algebra: Cholesky factorization, triangular and
//! SPD solves, and symmetric eigenvalues via cyclic Jacobi sweeps.
//!
//! Filter state dimensions stay below ten, so everything here is plain
//! loops over row-major buffers.

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite: leading minor {minor} is not positive")]
    NotPositiveDefinite { minor: usize },
    #[error("expected a square matrix, got shape {shape:?}")]
    NotSquare { shape: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn require_square(a: &Tensor) -> Result<usize, LinalgError> {
    if !a.is_matrix() || a.rows() != a.cols() {
        return Err(LinalgError::NotSquare {
            shape: a.shape().to_vec(),
        });
    }
    Ok(a.rows())
}

/// Lower-triangular Cholesky factor `L` with `L L^T = A`.
///
/// Only the lower triangle of `A` is read. Failure reports the 1-based
/// index of the first non-positive leading minor.
pub fn cholesky(a: &Tensor) -> Result<Tensor, LinalgError> {
    let n = require_square(a)?;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(LinalgError::NotPositiveDefinite { minor: i + 1 });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(Tensor::new(vec![n, n], l).expect("square buffer"))
}

/// Solves `L y = b` for lower-triangular `L`, column by column.
pub fn solve_lower(l: &Tensor, b: &Tensor) -> Result<Tensor, LinalgError> {
    let n = require_square(l)?;
    let cols = if b.is_matrix() { b.cols() } else { 1 };
    let mut x = b.data().to_vec();
    for c in 0..cols {
        for i in 0..n {
            let mut s = x[i * cols + c];
            for k in 0..i {
                s -= l.at(i, k) * x[k * cols + c];
            }
            x[i * cols + c] = s / l.at(i, i);
        }
    }
    Ok(Tensor::new(b.shape().to_vec(), x).expect("same shape"))
}

/// Solves `L^T y = b` for lower-triangular `L`.
pub fn solve_lower_transposed(l: &Tensor, b: &Tensor) -> Result<Tensor, LinalgError> {
    let n = require_square(l)?;
    let cols = if b.is_matrix() { b.cols() } else { 1 };
    let mut x = b.data().to_vec();
    for c in 0..cols {
        for i in (0..n).rev() {
            let mut s = x[i * cols + c];
            for k in i + 1..n {
                s -= l.at(k, i) * x[k * cols + c];
            }
            x[i * cols + c] = s / l.at(i, i);
        }
    }
    Ok(Tensor::new(b.shape().to_vec(), x).expect("same shape"))
}

/// Solves `A X = B` for symmetric positive definite `A` via Cholesky.
pub fn spd_solve(a: &Tensor, b: &Tensor) -> Result<Tensor, LinalgError> {
    let l = cholesky(a)?;
    chol_solve(&l, b)
}

/// Solves `A X = B` given the Cholesky factor `L` of `A`.
pub fn chol_solve(l: &Tensor, b: &Tensor) -> Result<Tensor, LinalgError> {
    let y = solve_lower(l, b)?;
    solve_lower_transposed(l, &y)
}

/// Eigenvalues of a symmetric matrix, ascending, via cyclic Jacobi rotations.
pub fn sym_eigenvalues(a: &Tensor) -> Result<Vec<f64>, LinalgError> {
    let n = require_square(a)?;
    let mut m = a.data().to_vec();
    let at = |m: &[f64], i: usize, j: usize| m[i * n + j];
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += at(&m, i, j).abs();
            }
        }
        if off < 1e-14 * (1.0 + a.max_abs()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = at(&m, p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = at(&m, p, p);
                let aqq = at(&m, q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = at(&m, k, p);
                    let akq = at(&m, k, q);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = at(&m, p, k);
                    let aqk = at(&m, q, k);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    Ok(eig)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Tensor) -> Result<f64, LinalgError> {
    Ok(sym_eigenvalues(a)?[0])
}

/// Spectral radius of a 2x2 matrix (closed form, handles complex pairs).
pub fn spectral_radius_2x2(a: &Tensor) -> f64 {
    debug_assert_eq!(a.shape(), &[2, 2]);
    let tr = a.at(0, 0) + a.at(1, 1);
    let det = a.at(0, 0) * a.at(1, 1) - a.at(0, 1) * a.at(1, 0);
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        (tr / 2.0 + r).abs().max((tr / 2.0 - r).abs())
    } else {
        // complex conjugate pair: |lambda| = sqrt(det)
        det.abs().sqrt()
    }
}
