//! Conjugate-gradient engine shared by the cell, resolvent, and local
//! solvers. Supports a diagonal (scalar-field) inner-product weight, an
//! optional preconditioner, and optional mean-zero projection for solves on
//! the orthogonal complement of constants.

use serde::{Deserialize, Serialize};

use crate::error::{PerihomError, Result};
use crate::torus::PeriodicField;

/// Options for [`cg_solve`].
#[derive(Clone, Copy, Debug)]
pub struct CgOptions {
    /// Relative tolerance: stop when the plain L² residual norm drops below
    /// `tol · ‖rhs‖`.
    pub tol: f64,
    pub max_iter: usize,
    /// Project iterates and residuals onto mean-zero fields every iteration
    /// (for operators whose kernel is the constants).
    pub project_mean_zero: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            tol: crate::tolerances::CG_TOL,
            max_iter: crate::tolerances::CG_MAX_ITER,
            project_mean_zero: false,
        }
    }
}

/// Outcome of a CG solve.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// Final absolute plain-L² residual norm.
    pub residual: f64,
    pub rhs_norm: f64,
    pub converged: bool,
}

/// Preconditioned conjugate gradients for `A x = rhs`.
///
/// `apply` must be self-adjoint and positive definite with respect to the
/// (optionally weighted) inner product on the subspace being solved over;
/// `precond`, when given, must be self-adjoint positive definite in the same
/// sense. The convergence check uses the plain (unweighted) residual norm.
pub fn cg_solve(
    apply: &dyn Fn(&PeriodicField) -> PeriodicField,
    rhs: &PeriodicField,
    x0: Option<PeriodicField>,
    weight: Option<&PeriodicField>,
    precond: Option<&dyn Fn(&PeriodicField) -> PeriodicField>,
    opts: &CgOptions,
) -> Result<(PeriodicField, CgReport)> {
    let dot = |a: &PeriodicField, b: &PeriodicField| -> f64 {
        match weight {
            Some(w) => a.inner_weighted(b, w),
            None => a.inner(b),
        }
    };
    let rhs_norm = rhs.norm_l2();
    let mut x = match x0 {
        Some(x0) => x0,
        None => PeriodicField::zeros(rhs.grid, rhs.components),
    };
    if opts.project_mean_zero {
        x.project_mean_zero();
    }
    if rhs_norm == 0.0 {
        return Ok((
            PeriodicField::zeros(rhs.grid, rhs.components),
            CgReport {
                iterations: 0,
                residual: 0.0,
                rhs_norm,
                converged: true,
            },
        ));
    }

    let mut r = rhs.clone();
    let ax = apply(&x);
    r.axpy(-1.0, &ax);
    if opts.project_mean_zero {
        r.project_mean_zero();
    }
    let mut z = match precond {
        Some(p) => p(&r),
        None => r.clone(),
    };
    if opts.project_mean_zero {
        z.project_mean_zero();
    }
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let target = opts.tol * rhs_norm;
    let mut iterations = 0usize;
    let mut residual = r.norm_l2();

    while residual > target && iterations < opts.max_iter {
        let mut q = apply(&p);
        if opts.project_mean_zero {
            q.project_mean_zero();
        }
        let pq = dot(&p, &q);
        if !(pq.is_finite() && pq > 0.0) {
            return Err(PerihomError::Convergence(format!(
                "CG broke down at iteration {iterations}: ⟨p, Ap⟩ = {pq}"
            )));
        }
        let alpha = rz / pq;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &q);
        if opts.project_mean_zero {
            r.project_mean_zero();
        }
        z = match precond {
            Some(pc) => pc(&r),
            None => r.clone(),
        };
        if opts.project_mean_zero {
            z.project_mean_zero();
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        let mut p_next = z.clone();
        p_next.axpy(beta, &p);
        p = p_next;
        rz = rz_new;
        iterations += 1;
        residual = r.norm_l2();
    }

    Ok((
        x,
        CgReport {
            iterations,
            residual,
            rhs_norm,
            converged: residual <= target,
        },
    ))
}
