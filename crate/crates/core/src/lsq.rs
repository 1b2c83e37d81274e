//! Minimum-norm linear least squares via a truncated SVD.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values below `RCOND * sigma_max` are treated as zero.
pub const RCOND: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LsqSolution {
    pub solution: DVector<f64>,
    /// Numerical rank after truncation.
    pub rank: usize,
    pub sigma_max: f64,
    /// `rank < min(rows, cols)`, or the matrix was identically zero.
    pub rank_deficient: bool,
}

/// Minimum-norm minimiser of `||A x - b||`.
pub fn solve_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<LsqSolution> {
    if a.nrows() == 0 || a.nrows() != b.len() {
        return Err(Error::Input(format!(
            "least squares needs a non-empty system with matching rhs, got {}x{} and {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in least-squares system".into()));
    }
    let full = a.nrows().min(a.ncols());
    let sigma_max = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sigma_max == 0.0 {
        return Ok(LsqSolution {
            solution: DVector::zeros(a.ncols()),
            rank: 0,
            sigma_max: 0.0,
            rank_deficient: true,
        });
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = RCOND * smax;
    let rank = svd.singular_values.iter().filter(|s| **s > cutoff).count();
    let solution = svd
        .solve(b, cutoff)
        .map_err(|e| Error::Numerical(format!("SVD solve failed: {e}")))?;
    Ok(LsqSolution { solution, rank, sigma_max: smax, rank_deficient: rank < full })
}

/// Gauss-Newton step: minimum-norm solution of `J * delta = -r`.
pub fn lsq_update(jacobian: &DMatrix<f64>, residual: &DVector<f64>) -> Result<LsqSolution> {
    let neg = -residual;
    solve_min_norm(jacobian, &neg)
}
