//! Central finite differences: the independent oracle the tape is checked
//! against.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FdError {
    #[error("objective returned a non-finite value ({value}) while probing coordinate {coordinate}")]
    NonFiniteSample { coordinate: usize, value: f64 },
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` per
/// coordinate. The objective is treated as a black box; any non-finite
/// sample aborts with the offending coordinate.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>, FdError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(FdError::BadStep(h));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let xi = x[i];
        probe[i] = xi + h;
        let fp = f(&probe);
        if !fp.is_finite() {
            return Err(FdError::NonFiniteSample {
                coordinate: i,
                value: fp,
            });
        }
        probe[i] = xi - h;
        let fm = f(&probe);
        if !fm.is_finite() {
            return Err(FdError::NonFiniteSample {
                coordinate: i,
                value: fm,
            });
        }
        probe[i] = xi;
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_slope() {
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], 1e-6).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn abs_at_kink_gives_symmetric_average() {
        let g = finite_diff_gradient(|x| x[0].abs(), &[0.0], 1e-6).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn non_finite_sample_is_reported() {
        // sqrt at 0 probes x - h < 0 and returns NaN on that side.
        let err = finite_diff_gradient(|x| x[0].sqrt(), &[0.0], 1e-6).unwrap_err();
        match err {
            FdError::NonFiniteSample { coordinate, .. } => assert_eq!(coordinate, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn multi_coordinate() {
        let g = finite_diff_gradient(|x| x[0] * x[1] + x[1].sin(), &[2.0, 0.5], 1e-6).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-8);
        assert!((g[1] - (2.0 + 0.5f64.cos())).abs() < 1e-8);
    }
}
