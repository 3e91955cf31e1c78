//! Small dense solvers shared by the closed-form regressions and the
//! correlation-matrix recursion.

use nalgebra::DMatrix;

/// Solves `A X = B` for symmetric positive semidefinite `A`.
///
/// Cholesky is attempted first; if `A` is numerically singular a jitter of
/// `1e-10 · tr(A)/p` is added to the diagonal (growing tenfold until the
/// factorization succeeds). Returns the solution and the jitter used.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, Option<f64>) {
    let p = a.nrows();
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return (x, None);
        }
    }
    let trace = a.trace().abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-10 * trace / p.max(1) as f64;
    loop {
        let mut aj = a.clone();
        for i in 0..p {
            aj[(i, i)] += jitter;
        }
        if let Some(chol) = aj.cholesky() {
            let x = chol.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                log::warn!("singular normal matrix regularized with jitter {jitter:.3e}");
                return (x, Some(jitter));
            }
        }
        jitter *= 10.0;
        if !jitter.is_finite() || jitter > trace {
            // Fall back to a pseudo-inverse; only reachable for pathological input.
            let svd = a.clone().svd(true, true);
            let x = svd
                .solve(b, 1e-12 * trace)
                .unwrap_or_else(|_| DMatrix::zeros(p, b.ncols()));
            log::warn!("normal matrix solved by pseudo-inverse");
            return (x, Some(jitter));
        }
    }
}

/// Inverse of a symmetric positive semidefinite matrix with the same
/// jitter policy as [`solve_spd`].
pub fn inverse_spd(a: &DMatrix<f64>) -> (DMatrix<f64>, Option<f64>) {
    solve_spd(a, &DMatrix::identity(a.nrows(), a.nrows()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_well_conditioned_system() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let (x, jitter) = solve_spd(&a, &b);
        assert!(jitter.is_none());
        assert!((&a * &x - &b).norm() < 1e-14);
    }

    #[test]
    fn singular_system_gets_jitter() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[2.0, 2.0]);
        let (x, jitter) = solve_spd(&a, &b);
        assert!(jitter.is_some());
        assert!(x.iter().all(|v| v.is_finite()));
        assert!((&a * &x - &b).norm() < 1e-6);
    }
}
