//! Gauss-Newton iteration on a residual with an analytic Jacobian.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq::lsq_update;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Stop once `max |delta| < step_tol`.
    pub step_tol: f64,
    /// Stop once the residual norm changes by less than this fraction.
    pub stagnation_tol: f64,
    /// Residual growth factor over [`DIVERGENCE_WINDOW`] iterations treated as divergence.
    pub divergence_factor: f64,
    /// Halve a step up to this many times until the residual norm drops. Zero disables.
    pub max_halvings: usize,
}

pub const DIVERGENCE_WINDOW: usize = 5;

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { max_iter: 50, step_tol: 1e-10, stagnation_tol: 1e-12, divergence_factor: 10.0, max_halvings: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NewtonDiagnostics {
    pub iterations: usize,
    /// Residual 2-norm before each update, plus the final one.
    pub residual_norms: Vec<f64>,
    pub converged: bool,
    /// Residual rose after the second iteration.
    pub non_monotone: bool,
    pub rank_deficient: bool,
    /// Number of step halvings taken by the line search.
    pub halvings: usize,
}

impl NewtonDiagnostics {
    pub fn final_residual(&self) -> f64 {
        self.residual_norms.last().copied().unwrap_or(f64::NAN)
    }
}

/// Iterates `u <- u + alpha * delta` with `delta` the minimum-norm solution of `J delta = -r`.
///
/// `eval` fills the residual and Jacobian at `u`. `project` may modify the
/// step before it is applied (for instance to bound parameter moves). With
/// `max_halvings > 0` the step is halved until the residual norm decreases;
/// a step that cannot decrease it ends the iteration as stagnated.
pub fn gauss_newton<E, P>(
    mut u: DVector<f64>,
    mut eval: E,
    mut project: P,
    opts: &NewtonOptions,
) -> Result<(DVector<f64>, NewtonDiagnostics)>
where
    E: FnMut(&DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>,
    P: FnMut(&DVector<f64>, &mut DVector<f64>),
{
    let mut diag = NewtonDiagnostics::default();
    let (mut r, mut j) = eval(&u)?;
    for it in 0..opts.max_iter {
        let norm = r.norm();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("residual became non-finite at iteration {it}")));
        }
        if it >= 2 && norm > diag.residual_norms[it - 1] * (1.0 + 1e-9) {
            diag.non_monotone = true;
        }
        diag.residual_norms.push(norm);
        if it >= DIVERGENCE_WINDOW {
            let window_min = diag.residual_norms[it - DIVERGENCE_WINDOW..it].iter().copied().fold(f64::INFINITY, f64::min);
            // growth at round-off level is not divergence
            let floor = 1e-12 * diag.residual_norms[0];
            if norm > opts.divergence_factor * window_min.max(floor) {
                return Err(Error::Numerical(format!(
                    "residual grew from {window_min:.3e} to {norm:.3e} within {DIVERGENCE_WINDOW} iterations"
                )));
            }
        }
        if norm == 0.0 {
            diag.converged = true;
            break;
        }
        if it > 0 {
            let prev = diag.residual_norms[it - 1];
            if (prev - norm).abs() <= opts.stagnation_tol * prev {
                diag.converged = true;
                break;
            }
        }
        let sol = lsq_update(&j, &r)?;
        diag.rank_deficient |= sol.rank_deficient;
        let mut step = sol.solution;
        project(&u, &mut step);
        let mut halvings = 0;
        let (trial, r_new, j_new) = loop {
            let trial = &u + &step;
            let (rt, jt) = eval(&trial)?;
            let nt = rt.norm();
            if opts.max_halvings == 0 || (nt.is_finite() && nt < norm) {
                break (trial, rt, jt);
            }
            if halvings == opts.max_halvings {
                // no descent along the step: the iterate is as good as it gets
                diag.converged = true;
                diag.iterations = it;
                diag.residual_norms.push(norm);
                return Ok((u, diag));
            }
            step *= 0.5;
            halvings += 1;
        };
        diag.halvings += halvings;
        u = trial;
        r = r_new;
        j = j_new;
        diag.iterations = it + 1;
        if step.amax() < opts.step_tol {
            diag.converged = true;
            diag.residual_norms.push(r.norm());
            break;
        }
    }
    Ok((u, diag))
}
