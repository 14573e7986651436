//! Small dense linear-algebra helpers shared by the surrogate and KLE code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{BodeError, Result};

/// Smallest relative jitter tried when a plain factorization fails.
pub const JITTER_START: f64 = 1e-8;
/// Largest relative jitter before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// A Cholesky factor together with the diagonal jitter it needed.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    /// Absolute jitter added to the diagonal (0 when none was needed).
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Factorizes a symmetric matrix, adding diagonal jitter from
/// `JITTER_START * mean(diag)` and doubling up to `JITTER_MAX * mean(diag)`.
pub fn jittered_cholesky(mat: &DMatrix<f64>) -> Result<JitteredCholesky> {
    let n = mat.nrows();
    if n == 0 {
        return Ok(JitteredCholesky {
            chol: Cholesky::new(DMatrix::zeros(0, 0)).expect("empty factorization"),
            jitter: 0.0,
        });
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(BodeError::NotPositiveDefinite { jitter: 0.0 });
    }
    if let Some(chol) = Cholesky::new(mat.clone()) {
        return Ok(JitteredCholesky { chol, jitter: 0.0 });
    }
    let mean_diag = (mat.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = JITTER_START;
    let mut last = 0.0;
    while rel <= JITTER_MAX * (1.0 + 1e-12) {
        let jitter = rel * mean_diag;
        let mut m = mat.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(JitteredCholesky { chol, jitter });
        }
        last = jitter;
        rel *= 2.0;
    }
    Err(BodeError::NotPositiveDefinite { jitter: last })
}

/// Solves `L x = b` for lower-triangular `L` (in place on a copy).
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor with positive diagonal")
}

/// Sample mean and unbiased sample variance.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, ss / (n - 1) as f64)
}

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n - 1) * p`). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_spd_needs_no_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = jittered_cholesky(&m).unwrap();
        assert_eq!(c.jitter, 0.0);
        let expected = (2.0f64 * 1.0 - 0.25).ln();
        assert!((c.log_det() - expected).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        let m = DMatrix::from_element(3, 3, 1.0);
        let c = jittered_cholesky(&m).unwrap();
        assert!(c.jitter > 0.0 && c.jitter <= JITTER_MAX);
    }

    #[test]
    fn indefinite_matrix_reports_last_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match jittered_cholesky(&m) {
            Err(BodeError::NotPositiveDefinite { jitter }) => assert!(jitter > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quantile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.0);
        assert!((quantile_sorted(&v, 0.1) - 0.4).abs() < 1e-15);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
    }
}
