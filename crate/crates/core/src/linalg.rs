//! Tiny dense linear algebra over [`DVar`] for the n <= 3 systems handled
//! here. Everything is differentiable because it is ordinary tape
//! arithmetic; factorizations are unrolled, not called out to.

use crate::autodiff::DVar;
use thiserror::Error;

pub type DMat = Vec<Vec<DVar>>;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite: pivot {pivot} has value {value}")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

pub fn dot(a: &[DVar], b: &[DVar]) -> DVar {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = DVar::constant(0.0);
    for (x, y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

pub fn mat_vec(m: &[Vec<DVar>], v: &[DVar]) -> Vec<DVar> {
    m.iter().map(|row| dot(row, v)).collect()
}

pub fn identity_scaled(n: usize, s: f64) -> DMat {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| DVar::constant(if i == j { s } else { 0.0 }))
                .collect()
        })
        .collect()
}

/// `m + s I` without touching the off-diagonal entries.
pub fn add_diag(m: &DMat, s: f64) -> DMat {
    m.iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, e)| if i == j { e + s } else { e.clone() })
                .collect()
        })
        .collect()
}

/// Lower-triangular Cholesky factor of a symmetric positive definite
/// matrix. Failure of a pivot is how a bad mass matrix is detected.
pub fn cholesky(m: &DMat) -> Result<DMat, LinalgError> {
    let n = m.len();
    let mut l: DMat = vec![vec![DVar::constant(0.0); n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[i][j].clone();
            for k in 0..j {
                sum = sum - &l[i][k] * &l[j][k];
            }
            if i == j {
                match sum.sqrt_checked() {
                    Some(root) => l[i][j] = root,
                    None => {
                        return Err(LinalgError::NotPositiveDefinite {
                            pivot: i,
                            value: sum.value(),
                        })
                    }
                }
            } else {
                l[i][j] = &sum / &l[j][j];
            }
        }
    }
    Ok(l)
}

/// Solve `L L^T x = b` by forward and back substitution.
pub fn cholesky_solve(l: &DMat, b: &[DVar]) -> Vec<DVar> {
    let n = l.len();
    debug_assert_eq!(b.len(), n);
    let mut y: Vec<DVar> = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = b[i].clone();
        for (k, yk) in y.iter().enumerate() {
            s = s - &l[i][k] * yk;
        }
        y.push(&s / &l[i][i]);
    }
    let mut x = vec![DVar::constant(0.0); n];
    for i in (0..n).rev() {
        let mut s = y[i].clone();
        for k in (i + 1)..n {
            s = s - &l[k][i] * &x[k];
        }
        x[i] = &s / &l[i][i];
    }
    x
}

/// Determinant of a small square matrix (n <= 3), the quantity the
/// solver's relaxation rule accumulates. Non-square inputs count as zero,
/// which is the convention for decoupled off-diagonal blocks.
pub fn det_small(m: &DMat) -> DVar {
    let n = m.len();
    if n == 0 || m.iter().any(|row| row.len() != n) {
        return DVar::constant(0.0);
    }
    match n {
        1 => m[0][0].clone(),
        2 => &m[0][0] * &m[1][1] - &m[0][1] * &m[1][0],
        3 => {
            let a = &m[0][0] * (&m[1][1] * &m[2][2] - &m[1][2] * &m[2][1]);
            let b = &m[0][1] * (&m[1][0] * &m[2][2] - &m[1][2] * &m[2][0]);
            let c = &m[0][2] * (&m[1][0] * &m[2][1] - &m[1][1] * &m[2][0]);
            a - b + c
        }
        _ => unreachable!("contact blocks never exceed 3x3"),
    }
}

/// Euclidean norm of a short vector. Uses |x| for length 1 so the partial
/// at the origin is the one-sided unit, not an inf from sqrt.
pub fn norm(v: &[DVar]) -> DVar {
    match v.len() {
        0 => DVar::constant(0.0),
        1 => v[0].abs(),
        _ => {
            let mut s = DVar::constant(0.0);
            for x in v {
                s = s + x.square();
            }
            s.sqrt()
        }
    }
}
