//! Dense symmetric-positive-definite helpers shared by every solver.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result};

/// Relative jitter bounds: factorization retries start at `JITTER_START *
/// trace/n` on the diagonal and double up to `JITTER_MAX * trace/n`.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// Cached Cholesky factorization with a bounded-jitter retry policy.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    /// Absolute diagonal shift that was needed (0 when none).
    pub jitter: f64,
    n: usize,
}

impl SpdFactor {
    /// Factorizes `a` (symmetrized first; kernel assembly leaves only
    /// rounding-level asymmetry). On failure, retries with a diagonal shift
    /// growing geometrically from `1e-10 * trace/n` to `1e-6 * trace/n`.
    pub fn new(a: &DMatrix<f64>, what: &'static str) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::DimensionMismatch {
                what,
                left: n,
                right: a.ncols(),
            });
        }
        let sym = 0.5 * (a + a.transpose());
        if let Some(chol) = Cholesky::new(sym.clone()) {
            return Ok(Self {
                chol,
                jitter: 0.0,
                n,
            });
        }
        let scale = sym.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
        let mut jitter = JITTER_START * scale;
        let max_jitter = JITTER_MAX * scale;
        while jitter <= max_jitter {
            let mut shifted = sym.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(shifted) {
                return Ok(Self { chol, jitter, n });
            }
            jitter *= 2.0;
        }
        Err(Error::NotPositiveDefinite { what, max_jitter })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// log det of the factorized matrix (after any jitter).
    pub fn ln_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// `x^T A^{-1} y` through a cached factor.
pub fn quad_form(f: &SpdFactor, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    x.dot(&f.solve_vec(y))
}

/// Trace of `A^{-1} B` through a cached factor.
pub fn trace_solve(f: &SpdFactor, b: &DMatrix<f64>) -> f64 {
    f.solve_mat(b).trace()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spd(n: usize) -> DMatrix<f64> {
        // A = B B^T + I is strictly positive definite.
        let b = DMatrix::from_fn(n, n, |i, j| ((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.4);
        &b * b.transpose() + DMatrix::identity(n, n)
    }

    #[test]
    fn solves_match_direct_inverse() {
        let a = spd(8);
        let f = SpdFactor::new(&a, "test").unwrap();
        assert_eq!(f.jitter, 0.0);
        let rhs = DVector::from_fn(8, |i, _| (i as f64).sin());
        let x = f.solve_vec(&rhs);
        assert_relative_eq!((&a * &x - &rhs).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn quad_form_and_trace_solve_agree_with_inverse() {
        let a = spd(6);
        let f = SpdFactor::new(&a, "test").unwrap();
        let inv = a.clone().try_inverse().unwrap();
        let x = DVector::from_fn(6, |i, _| 1.0 + i as f64);
        let y = DVector::from_fn(6, |i, _| (i as f64) - 2.0);
        assert_relative_eq!(quad_form(&f, &x, &y), (x.transpose() * &inv * y)[(0, 0)], max_relative = 1e-10);
        let b = spd(6) * 0.3;
        assert_relative_eq!(trace_solve(&f, &b), (&inv * &b).trace(), max_relative = 1e-10);
    }

    #[test]
    fn ln_det_matches_lu() {
        let a = spd(5);
        let f = SpdFactor::new(&a, "test").unwrap();
        let det = a.lu().determinant();
        assert_relative_eq!(f.ln_det(), det.ln(), max_relative = 1e-10);
    }

    #[test]
    fn rank_deficient_matrix_gets_jitter() {
        // Outer product of one vector: rank 1, PSD but singular.
        let v = DVector::from_fn(7, |i, _| 1.0 + (i as f64));
        let a = &v * v.transpose();
        let f = SpdFactor::new(&a, "test").unwrap();
        assert!(f.jitter > 0.0);
        let trace_scale = a.trace() / 7.0;
        assert!(f.jitter <= JITTER_MAX * trace_scale * (1.0 + 1e-12));
    }

    #[test]
    fn indefinite_matrix_fails() {
        let mut a = DMatrix::identity(4, 4);
        a[(2, 2)] = -5.0;
        match SpdFactor::new(&a, "test") {
            Err(Error::NotPositiveDefinite { .. }) => {}
            Err(e) => panic!("expected NotPositiveDefinite, got {e:?}"),
            Ok(_) => panic!("expected NotPositiveDefinite, got a factorization"),
        }
    }
}
