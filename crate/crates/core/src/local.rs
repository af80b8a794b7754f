//! The local (homogenized limit) problem `(m I − 𝔠(x) D²) u = f` on the
//! periodic box, with `𝔠(x) = s(x) C̃`.
//!
//! Dividing by the positive scalar `s(x)` turns the equation into
//! `T u = f/s` with `T = m diag(1/s) + E`, `E = −C̃ D²`:
//! a symmetric positive definite operator in the standard inner product,
//! because E is a constant-coefficient operator with symbol
//! `Â_{il}(ξ) = Σ_{jk} c^{ijkl} ξ_j ξ_k` (symmetric positive semidefinite
//! whenever C̃ carries the elasticity symmetries and γ₁ > 0). E is applied
//! spectrally: d forward transforms, a d×d symbol multiplication per mode,
//! d inverse transforms.
//!
//! The solver is conjugate gradients preconditioned per mode by
//! `(m w̄ I + Â(ξ))⁻¹` with `w̄ = mean(1/s)` — exact for constant s, a
//! uniformly bounded perturbation otherwise. For constant s the solution is
//! also available in closed form per mode, `û = (m I + s̄ Â(ξ))⁻¹ f̂`, which
//! serves as an independent oracle for the iterative path.
//!
//! Nyquist convention: on an even grid the bin at frequency n/2 is its own
//! conjugate partner up to the sign of ξ, so the cross products ξ_j ξ_k
//! (j ≠ k) with exactly one factor at the Nyquist frequency are odd between
//! partner bins. The symbol zeroes those contributions — the standard
//! spectral rule that first derivatives vanish on the Nyquist mode — which
//! keeps the multiplier conjugate-symmetric, the operator self-adjoint on
//! real fields, and the per-mode inverse an exact inverse of the applied
//! operator. Fields resolved below the Nyquist frequency are untouched.

use serde::{Deserialize, Serialize};

use crate::cg::{cg_solve, CgOptions};
use crate::error::{PerihomError, Result};
use crate::kernels::{C64, NdFft};
use crate::operators::DomainRecord;
use crate::tensors::Tensor4;
use crate::torus::{PeriodicField, TorusGrid};

/// Convergence record of one local solve.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct LocalSolveReport {
    pub m: f64,
    pub iterations: usize,
    pub residual: f64,
    pub rhs_norm: f64,
    pub converged: bool,
    /// Geometric-mean residual reduction per iteration.
    pub contraction_factor: f64,
    pub scaling_min: f64,
    pub scaling_max: f64,
    pub domain: DomainRecord,
}

/// The local operator `m I − s(x) C̃ D²` prepared for repeated application
/// and solves on one grid.
pub struct LocalOperator {
    grid: TorusGrid,
    dimension: usize,
    m: f64,
    /// 1/s at every node.
    nu0: Vec<f64>,
    /// s at every node (kept for `apply`).
    s: Vec<f64>,
    s_min: f64,
    s_max: f64,
    fft: NdFft,
    /// Symbol matrices Â(ξ) per mode, row-major d×d.
    symbol: Vec<f64>,
    /// Preconditioner matrices (m w̄ I + Â(ξ))⁻¹ per mode, row-major d×d.
    precond_inv: Vec<f64>,
}

impl LocalOperator {
    pub fn new(grid: TorusGrid, ctilde: &Tensor4, scaling: &PeriodicField, m: f64) -> Result<Self> {
        let d = grid.dimension;
        if ctilde.dim() != d {
            return Err(PerihomError::GridMismatch(
                "C̃ dimension must match the grid".into(),
            ));
        }
        if scaling.grid != grid || scaling.components != 1 {
            return Err(PerihomError::GridMismatch(
                "scaling must be a scalar field on the solve grid".into(),
            ));
        }
        if m <= 0.0 {
            return Err(PerihomError::InvalidArgument("m must be positive".into()));
        }
        let nn = grid.node_count();
        let mut nu0 = vec![0.0; nn];
        let mut s = vec![0.0; nn];
        let mut s_min = f64::INFINITY;
        let mut s_max = f64::NEG_INFINITY;
        for (q, &v) in scaling.component(0).iter().enumerate() {
            if v <= 0.0 {
                return Err(PerihomError::Validation(
                    "scaling factor s(x) must be strictly positive".into(),
                ));
            }
            s[q] = v;
            nu0[q] = 1.0 / v;
            s_min = s_min.min(v);
            s_max = s_max.max(v);
        }
        let w_bar = nu0.iter().sum::<f64>() / nn as f64;

        // Symbol and preconditioner per mode.
        let freqs = grid.frequencies();
        let two_pi_over_l = 2.0 * std::f64::consts::PI / grid.box_length;
        let mut symbol = vec![0.0; nn * d * d];
        let mut precond_inv = vec![0.0; nn * d * d];
        let mut idx = vec![0usize; d];
        let mut xi = vec![0.0; d];
        let mut nyq = vec![false; d];
        for q in 0..nn {
            for k in 0..d {
                xi[k] = two_pi_over_l * freqs[idx[k]] as f64;
                nyq[k] = grid.n % 2 == 0 && idx[k] == grid.n / 2;
            }
            let base = q * d * d;
            fill_symbol(ctilde, &xi, &nyq, d, &mut symbol[base..base + d * d]);
            // (m w̄ I + Â) inverse, d ≤ 3: closed-form small inverses.
            let mut mat = [0.0f64; 9];
            for i in 0..d {
                for l in 0..d {
                    mat[i * d + l] = symbol[base + i * d + l];
                }
                mat[i * d + i] += m * w_bar;
            }
            invert_small(&mat, d, &mut precond_inv[base..base + d * d])?;

            for k in 0..d {
                idx[k] += 1;
                if idx[k] < grid.n {
                    break;
                }
                idx[k] = 0;
            }
        }

        Ok(Self {
            grid,
            dimension: d,
            m,
            nu0,
            s,
            s_min,
            s_max,
            fft: NdFft::new(d, grid.n),
            symbol,
            precond_inv,
        })
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn scaling_range(&self) -> (f64, f64) {
        (self.s_min, self.s_max)
    }

    fn check_field(&self, v: &PeriodicField) -> Result<()> {
        if v.grid != self.grid || v.components != self.dimension {
            return Err(PerihomError::GridMismatch(
                "field does not match the local operator grid".into(),
            ));
        }
        Ok(())
    }

    /// Multiply the spectral coefficients of `v` by per-mode d×d matrices.
    fn apply_mode_matrices(&self, mats: &[f64], v: &PeriodicField) -> PeriodicField {
        let d = self.dimension;
        let nn = self.grid.node_count();
        let hats: Vec<Vec<C64>> = (0..d).map(|c| self.fft.forward(v.component(c))).collect();
        let mut out = PeriodicField::zeros(self.grid, d);
        for i in 0..d {
            let mut spec = vec![C64::new(0.0, 0.0); nn];
            for (q, sp) in spec.iter_mut().enumerate() {
                let base = q * d * d;
                let mut acc = C64::new(0.0, 0.0);
                for l in 0..d {
                    acc += mats[base + i * d + l] * hats[l][q];
                }
                *sp = acc;
            }
            let vals = self.fft.inverse_real(spec);
            out.component_mut(i).copy_from_slice(&vals);
        }
        out
    }

    /// `E v = −C̃ D² v`, spectrally.
    pub fn apply_symbol(&self, v: &PeriodicField) -> Result<PeriodicField> {
        self.check_field(v)?;
        Ok(self.apply_mode_matrices(&self.symbol, v))
    }

    /// The physical operator `m v − s(x) C̃ D² v`.
    pub fn apply(&self, v: &PeriodicField) -> Result<PeriodicField> {
        self.check_field(v)?;
        let d = self.dimension;
        let nn = self.grid.node_count();
        let mut out = self.apply_mode_matrices(&self.symbol, v);
        for c in 0..d {
            let oc = out.component_mut(c);
            let vc = v.component(c);
            for q in 0..nn {
                oc[q] = self.m * vc[q] + self.s[q] * oc[q];
            }
        }
        Ok(out)
    }

    /// The divided form `T v = m (1/s) v + E v` (symmetric positive
    /// definite).
    fn apply_divided(&self, v: &PeriodicField) -> PeriodicField {
        let d = self.dimension;
        let nn = self.grid.node_count();
        let mut out = self.apply_mode_matrices(&self.symbol, v);
        for c in 0..d {
            let oc = out.component_mut(c);
            let vc = v.component(c);
            for q in 0..nn {
                oc[q] += self.m * self.nu0[q] * vc[q];
            }
        }
        out
    }

    /// Solve `(m I − s(x) C̃ D²) u = f` by preconditioned CG on the divided
    /// form.
    pub fn solve(&self, f: &PeriodicField, opts: &CgOptions) -> Result<(PeriodicField, LocalSolveReport)> {
        self.check_field(f)?;
        let d = self.dimension;
        let nn = self.grid.node_count();
        // Divided right-hand side f/s.
        let mut rhs = f.clone();
        for c in 0..d {
            let rc = rhs.component_mut(c);
            for q in 0..nn {
                rc[q] *= self.nu0[q];
            }
        }
        let apply = |v: &PeriodicField| self.apply_divided(v);
        let precond = |r: &PeriodicField| self.apply_mode_matrices(&self.precond_inv, r);
        let mut cg = *opts;
        cg.project_mean_zero = false;
        let (u, report) = cg_solve(&apply, &rhs, None, None, Some(&precond), &cg)?;
        if !report.converged {
            return Err(PerihomError::Convergence(format!(
                "local solve stalled at residual {:.3e} after {} iterations",
                report.residual, report.iterations
            )));
        }
        let contraction = if report.iterations > 0 && report.rhs_norm > 0.0 {
            (report.residual / report.rhs_norm)
                .max(f64::MIN_POSITIVE)
                .powf(1.0 / report.iterations as f64)
        } else {
            0.0
        };
        let local_report = LocalSolveReport {
            m: self.m,
            iterations: report.iterations,
            residual: report.residual,
            rhs_norm: report.rhs_norm,
            converged: report.converged,
            contraction_factor: contraction,
            scaling_min: self.s_min,
            scaling_max: self.s_max,
            domain: DomainRecord::periodic_box(self.grid.box_length, self.grid.n),
        };
        Ok((u, local_report))
    }
}

/// Closed-form per-mode solution of `(m I − s̄ C̃ D²) u = f` for constant
/// scaling s̄: `û(ξ) = (m I + s̄ Â(ξ))⁻¹ f̂(ξ)`. Independent oracle for the
/// iterative path.
pub fn solve_constant_scaling(
    grid: TorusGrid,
    ctilde: &Tensor4,
    s_bar: f64,
    m: f64,
    f: &PeriodicField,
) -> Result<PeriodicField> {
    let d = grid.dimension;
    if ctilde.dim() != d || f.grid != grid || f.components != d {
        return Err(PerihomError::GridMismatch(
            "constant-scaling solve needs matching grid, tensor and field".into(),
        ));
    }
    if s_bar <= 0.0 || m <= 0.0 {
        return Err(PerihomError::InvalidArgument(
            "m and s̄ must be positive".into(),
        ));
    }
    let nn = grid.node_count();
    let fft = NdFft::new(d, grid.n);
    let freqs = grid.frequencies();
    let two_pi_over_l = 2.0 * std::f64::consts::PI / grid.box_length;
    let hats: Vec<Vec<C64>> = (0..d).map(|c| fft.forward(f.component(c))).collect();
    let mut out_hats: Vec<Vec<C64>> = vec![vec![C64::new(0.0, 0.0); nn]; d];
    let mut idx = vec![0usize; d];
    let mut xi = vec![0.0; d];
    let mut nyq = vec![false; d];
    let mut sym = [0.0f64; 9];
    let mut mat = [0.0f64; 9];
    let mut inv = [0.0f64; 9];
    for q in 0..nn {
        for k in 0..d {
            xi[k] = two_pi_over_l * freqs[idx[k]] as f64;
            nyq[k] = grid.n % 2 == 0 && idx[k] == grid.n / 2;
        }
        fill_symbol(ctilde, &xi, &nyq, d, &mut sym[..d * d]);
        for i in 0..d {
            for l in 0..d {
                mat[i * d + l] = s_bar * sym[i * d + l];
            }
            mat[i * d + i] += m;
        }
        invert_small(&mat, d, &mut inv[..d * d])?;
        for i in 0..d {
            let mut acc = C64::new(0.0, 0.0);
            for l in 0..d {
                acc += inv[i * d + l] * hats[l][q];
            }
            out_hats[i][q] = acc;
        }
        for k in 0..d {
            idx[k] += 1;
            if idx[k] < grid.n {
                break;
            }
            idx[k] = 0;
        }
    }
    let mut out = PeriodicField::zeros(grid, d);
    for i in 0..d {
        let vals = fft.inverse_real(std::mem::take(&mut out_hats[i]));
        out.component_mut(i).copy_from_slice(&vals);
    }
    Ok(out)
}

/// Fill the d×d symbol matrix `Â_{il} = Σ_{jk} c^{ijkl} w_{jk}` at one mode,
/// where `w_{jk} = ξ_j ξ_k` except that cross products with exactly one
/// factor at the Nyquist frequency are zero (see the module notes).
fn fill_symbol(ctilde: &Tensor4, xi: &[f64], nyq: &[bool], d: usize, out: &mut [f64]) {
    let mut w = [0.0f64; 9];
    for j in 0..d {
        for k in 0..d {
            w[j * d + k] = if j != k && (nyq[j] ^ nyq[k]) {
                0.0
            } else {
                xi[j] * xi[k]
            };
        }
    }
    for i in 0..d {
        for l in 0..d {
            let mut a = 0.0;
            for j in 0..d {
                for k in 0..d {
                    a += ctilde.get(i, j, k, l) * w[j * d + k];
                }
            }
            out[i * d + l] = a;
        }
    }
}

/// Invert a symmetric positive definite d×d matrix (d ≤ 3) in place into
/// `out` (row-major).
fn invert_small(mat: &[f64], d: usize, out: &mut [f64]) -> Result<()> {
    match d {
        1 => {
            if mat[0] <= 0.0 {
                return Err(PerihomError::Validation(
                    "mode matrix is not positive definite".into(),
                ));
            }
            out[0] = 1.0 / mat[0];
        }
        2 => {
            let det = mat[0] * mat[3] - mat[1] * mat[2];
            if det <= 0.0 {
                return Err(PerihomError::Validation(
                    "mode matrix is not positive definite".into(),
                ));
            }
            out[0] = mat[3] / det;
            out[1] = -mat[1] / det;
            out[2] = -mat[2] / det;
            out[3] = mat[0] / det;
        }
        3 => {
            let c00 = mat[4] * mat[8] - mat[5] * mat[7];
            let c01 = mat[5] * mat[6] - mat[3] * mat[8];
            let c02 = mat[3] * mat[7] - mat[4] * mat[6];
            let det = mat[0] * c00 + mat[1] * c01 + mat[2] * c02;
            if det <= 0.0 {
                return Err(PerihomError::Validation(
                    "mode matrix is not positive definite".into(),
                ));
            }
            let inv_det = 1.0 / det;
            out[0] = c00 * inv_det;
            out[1] = (mat[2] * mat[7] - mat[1] * mat[8]) * inv_det;
            out[2] = (mat[1] * mat[5] - mat[2] * mat[4]) * inv_det;
            out[3] = c01 * inv_det;
            out[4] = (mat[0] * mat[8] - mat[2] * mat[6]) * inv_det;
            out[5] = (mat[2] * mat[3] - mat[0] * mat[5]) * inv_det;
            out[6] = c02 * inv_det;
            out[7] = (mat[1] * mat[6] - mat[0] * mat[7]) * inv_det;
            out[8] = (mat[0] * mat[4] - mat[1] * mat[3]) * inv_det;
        }
        _ => {
            return Err(PerihomError::InvalidArgument(
                "mode inversion supports d ≤ 3".into(),
            ))
        }
    }
    Ok(())
}
