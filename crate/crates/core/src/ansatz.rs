//! The two-scale ansatz `wᵉ(x) = u(x) + ε 𝔄(x/ε) Du(x) + ε² 𝔅(x/ε) D²u(x)`
//! and its consistency residual `Lᵉ wᵉ − 𝔠(x) D² u` against the local limit.
//!
//! Smooth profiles u come from a small library of analytic, box-periodic
//! fields with closed-form gradients and Hessians, so no numerical
//! differentiation enters the comparison. Corrector values at `x/ε` are read
//! by exact node mapping: when the box grid is the `n_ε`-fold tiling of the
//! cell grid, the fractional cell coordinate of box node `j` is the cell
//! node `j mod n_cell` exactly in floating point. Any other geometry is
//! rejected rather than interpolated.

use serde::{Deserialize, Serialize};

use crate::cell::{CorrectorA, CorrectorB};
use crate::effective::EffectiveTensor;
use crate::error::{PerihomError, Result};
use crate::model::CoefficientModel;
use crate::operators::BoxOperator;
use crate::tensors::{Tensor2, Tensor3};
use crate::torus::{PeriodicField, TorusGrid};

/// Number of Gaussian images summed per axis on each side for the
/// periodized bump; the omitted tail is below 1e-25 of the peak for the
/// widths in the library.
const BUMP_IMAGES: i64 = 4;

/// Analytic box-periodic vector fields with closed-form derivatives.
///
/// All shapes are `L`-periodic in every coordinate and dimension-aware
/// (components beyond what a shape defines are zero).
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum AnalyticField {
    /// Constant vector; gradient and Hessian vanish identically.
    Constant { values: Vec<f64> },
    /// One low mode per component: `u_k` alternates sin/cos of `2π x_k / L`.
    TrigBasic,
    /// Products of low modes mixing two coordinates per component.
    TrigMixed,
    /// Higher-frequency content: wavenumber-2 modes and a mixed phase.
    Mode2,
    /// A periodized Gaussian bump centered in the box, width `sigma_frac·L`,
    /// with per-component amplitudes (1, −1/2, 1/4).
    GaussianBump { sigma_frac: f64 },
}

impl AnalyticField {
    /// Value of the field at `x` (length d) in a box of side `l_box`.
    pub fn value(&self, d: usize, l_box: f64, x: &[f64]) -> Result<Vec<f64>> {
        let (v, _, _) = self.eval_all(d, l_box, x, 0)?;
        Ok(v)
    }

    /// The gradient `(Du)_{kl} = ∂u_k/∂x_l` at `x`.
    pub fn gradient(&self, d: usize, l_box: f64, x: &[f64]) -> Result<Tensor2> {
        let (_, g, _) = self.eval_all(d, l_box, x, 1)?;
        Ok(g)
    }

    /// The Hessian `M^{jkl} = ∂²u_j/∂x_k∂x_l` at `x`.
    pub fn hessian(&self, d: usize, l_box: f64, x: &[f64]) -> Result<Tensor3> {
        let (_, _, h) = self.eval_all(d, l_box, x, 2)?;
        Ok(h)
    }

    /// Sample the field's values on a grid.
    pub fn sample(&self, grid: TorusGrid) -> Result<PeriodicField> {
        let d = grid.dimension;
        let l = grid.box_length;
        PeriodicField::from_fn(grid, d, |x| {
            self.value(d, l, x).expect("validated shape")
        })
    }

    /// Stable name for reports and file paths.
    pub fn name(&self) -> String {
        match self {
            AnalyticField::Constant { .. } => "constant".into(),
            AnalyticField::TrigBasic => "trig-basic".into(),
            AnalyticField::TrigMixed => "trig-mixed".into(),
            AnalyticField::Mode2 => "mode-2".into(),
            AnalyticField::GaussianBump { .. } => "gaussian-bump".into(),
        }
    }

    fn validate(&self, d: usize, l_box: f64, x: &[f64]) -> Result<()> {
        crate::tensors::check_dimension(d)?;
        if x.len() != d {
            return Err(PerihomError::InvalidArgument(
                "coordinate length must match the dimension".into(),
            ));
        }
        if l_box <= 0.0 {
            return Err(PerihomError::InvalidArgument(
                "box length must be positive".into(),
            ));
        }
        if let AnalyticField::GaussianBump { sigma_frac } = self {
            if !(*sigma_frac > 0.0 && *sigma_frac <= 0.5) {
                return Err(PerihomError::InvalidArgument(
                    "bump width must lie in (0, L/2]".into(),
                ));
            }
        }
        Ok(())
    }

    /// Evaluate value, gradient, and Hessian in one pass (`order` only
    /// gates the validation burden, everything is cheap enough to fill).
    fn eval_all(
        &self,
        d: usize,
        l_box: f64,
        x: &[f64],
        _order: usize,
    ) -> Result<(Vec<f64>, Tensor2, Tensor3)> {
        self.validate(d, l_box, x)?;
        let tau = 2.0 * std::f64::consts::PI / l_box;
        let mut v = vec![0.0; d];
        let mut g = Tensor2::zeros(d);
        let mut h = Tensor3::zeros(d);
        match self {
            AnalyticField::Constant { values } => {
                for i in 0..d {
                    v[i] = values.get(i).copied().unwrap_or(0.0);
                }
            }
            AnalyticField::TrigBasic => {
                // u_k = sin(τ x_k) for even k, cos(τ x_k) for odd k.
                for k in 0..d {
                    let t = tau * x[k];
                    let (s, c) = t.sin_cos();
                    if k % 2 == 0 {
                        v[k] = s;
                        g.set(k, k, tau * c);
                        h.set(k, k, k, -tau * tau * s);
                    } else {
                        v[k] = c;
                        g.set(k, k, -tau * s);
                        h.set(k, k, k, -tau * tau * c);
                    }
                }
            }
            AnalyticField::TrigMixed => {
                if d == 1 {
                    // u_0 = sin(τx) + ½ cos(2τx)
                    let t = tau * x[0];
                    v[0] = t.sin() + 0.5 * (2.0 * t).cos();
                    g.set(0, 0, tau * t.cos() - tau * (2.0 * t).sin());
                    h.set(
                        0,
                        0,
                        0,
                        -tau * tau * t.sin() - 2.0 * tau * tau * (2.0 * t).cos(),
                    );
                } else {
                    // u_0 = sin(τx_0) cos(τx_1), u_1 = ½ cos(τx_0) sin(τx_1),
                    // u_2 = ⅓ sin(τx_0) sin(τx_1) sin(τx_2) when present.
                    let (s0, c0) = (tau * x[0]).sin_cos();
                    let (s1, c1) = (tau * x[1]).sin_cos();
                    v[0] = s0 * c1;
                    g.set(0, 0, tau * c0 * c1);
                    g.set(0, 1, -tau * s0 * s1);
                    h.set(0, 0, 0, -tau * tau * s0 * c1);
                    h.set(0, 1, 1, -tau * tau * s0 * c1);
                    h.set(0, 0, 1, -tau * tau * c0 * s1);
                    h.set(0, 1, 0, -tau * tau * c0 * s1);

                    v[1] = 0.5 * c0 * s1;
                    g.set(1, 0, -0.5 * tau * s0 * s1);
                    g.set(1, 1, 0.5 * tau * c0 * c1);
                    h.set(1, 0, 0, -0.5 * tau * tau * c0 * s1);
                    h.set(1, 1, 1, -0.5 * tau * tau * c0 * s1);
                    h.set(1, 0, 1, -0.5 * tau * tau * s0 * c1);
                    h.set(1, 1, 0, -0.5 * tau * tau * s0 * c1);

                    if d > 2 {
                        let (s2, c2) = (tau * x[2]).sin_cos();
                        let a = 1.0 / 3.0;
                        v[2] = a * s0 * s1 * s2;
                        g.set(2, 0, a * tau * c0 * s1 * s2);
                        g.set(2, 1, a * tau * s0 * c1 * s2);
                        g.set(2, 2, a * tau * s0 * s1 * c2);
                        let tt = tau * tau;
                        h.set(2, 0, 0, -a * tt * s0 * s1 * s2);
                        h.set(2, 1, 1, -a * tt * s0 * s1 * s2);
                        h.set(2, 2, 2, -a * tt * s0 * s1 * s2);
                        h.set(2, 0, 1, a * tt * c0 * c1 * s2);
                        h.set(2, 1, 0, a * tt * c0 * c1 * s2);
                        h.set(2, 0, 2, a * tt * c0 * s1 * c2);
                        h.set(2, 2, 0, a * tt * c0 * s1 * c2);
                        h.set(2, 1, 2, a * tt * s0 * c1 * c2);
                        h.set(2, 2, 1, a * tt * s0 * c1 * c2);
                    }
                }
            }
            AnalyticField::Mode2 => {
                // u_0 = sin(2τ x_0) (times cos(τ x_1) when d ≥ 2);
                // u_1 = ¼ sin(τ x_0 + 2τ x_1).
                if d == 1 {
                    let t = tau * x[0];
                    v[0] = (2.0 * t).sin();
                    g.set(0, 0, 2.0 * tau * (2.0 * t).cos());
                    h.set(0, 0, 0, -4.0 * tau * tau * (2.0 * t).sin());
                } else {
                    let (s0, c0) = (2.0 * tau * x[0]).sin_cos();
                    let (s1, c1) = (tau * x[1]).sin_cos();
                    v[0] = s0 * c1;
                    g.set(0, 0, 2.0 * tau * c0 * c1);
                    g.set(0, 1, -tau * s0 * s1);
                    let tt = tau * tau;
                    h.set(0, 0, 0, -4.0 * tt * s0 * c1);
                    h.set(0, 1, 1, -tt * s0 * c1);
                    h.set(0, 0, 1, -2.0 * tt * c0 * s1);
                    h.set(0, 1, 0, -2.0 * tt * c0 * s1);

                    let phase = tau * x[0] + 2.0 * tau * x[1];
                    let (sp, cp) = phase.sin_cos();
                    v[1] = 0.25 * sp;
                    g.set(1, 0, 0.25 * tau * cp);
                    g.set(1, 1, 0.5 * tau * cp);
                    h.set(1, 0, 0, -0.25 * tt * sp);
                    h.set(1, 0, 1, -0.5 * tt * sp);
                    h.set(1, 1, 0, -0.5 * tt * sp);
                    h.set(1, 1, 1, -tt * sp);
                }
            }
            AnalyticField::GaussianBump { sigma_frac } => {
                let sigma = sigma_frac * l_box;
                let inv_s2 = 1.0 / (sigma * sigma);
                let amps = [1.0, -0.5, 0.25];
                // The truncated lattice sum over [−BUMP_IMAGES, BUMP_IMAGES]^d
                // factors into per-axis image sums, so evaluate S_k, S_k',
                // S_k'' per axis and combine by the product rule.
                let mut s0 = vec![0.0; d];
                let mut s1 = vec![0.0; d];
                let mut s2 = vec![0.0; d];
                for k in 0..d {
                    for j in -BUMP_IMAGES..=BUMP_IMAGES {
                        let z = x[k] - 0.5 * l_box + j as f64 * l_box;
                        let e = (-0.5 * z * z * inv_s2).exp();
                        s0[k] += e;
                        s1[k] += -z * inv_s2 * e;
                        s2[k] += (z * z * inv_s2 - 1.0) * inv_s2 * e;
                    }
                }
                let gval: f64 = s0.iter().product();
                let mut ggrad = vec![0.0; d];
                let mut ghess = vec![0.0; d * d];
                for k in 0..d {
                    let others: f64 = (0..d).filter(|&m| m != k).map(|m| s0[m]).product();
                    ggrad[k] = s1[k] * others;
                    ghess[k * d + k] = s2[k] * others;
                    for l in (k + 1)..d {
                        let rest: f64 = (0..d)
                            .filter(|&m| m != k && m != l)
                            .map(|m| s0[m])
                            .product();
                        let cross = s1[k] * s1[l] * rest;
                        ghess[k * d + l] = cross;
                        ghess[l * d + k] = cross;
                    }
                }
                for i in 0..d {
                    let a = amps[i.min(2)];
                    v[i] = a * gval;
                    for k in 0..d {
                        g.set(i, k, a * ggrad[k]);
                        for l in 0..d {
                            h.set(i, k, l, a * ghess[k * d + l]);
                        }
                    }
                }
            }
        }
        Ok((v, g, h))
    }
}

/// The forcing library used for resolvent sweeps.
pub fn forcing_library(d: usize) -> Vec<AnalyticField> {
    let mut values = vec![1.0, 0.7, -0.3];
    values.truncate(d);
    vec![
        AnalyticField::Constant { values },
        AnalyticField::TrigBasic,
        AnalyticField::TrigMixed,
        AnalyticField::Mode2,
        AnalyticField::GaussianBump { sigma_frac: 0.12 },
    ]
}

/// The smooth-profile library used for consistency sweeps.
pub fn profile_library(d: usize) -> Vec<AnalyticField> {
    let mut values = vec![0.6, -1.1, 0.4];
    values.truncate(d);
    vec![
        AnalyticField::Constant { values },
        AnalyticField::TrigBasic,
        AnalyticField::TrigMixed,
        AnalyticField::GaussianBump { sigma_frac: 0.3 },
    ]
}

/// Map a box node to its cell node under exact tiling, or explain why the
/// geometry does not admit one.
fn check_tiling(boxop: &BoxOperator, cell: TorusGrid) -> Result<()> {
    if boxop.cell_grid != cell {
        return Err(PerihomError::GridMismatch(format!(
            "correctors live on a {}^d cell grid but the box operator was \
             built over a {}^d cell; exact node mapping requires identical \
             cell grids (no interpolation fallback is provided)",
            cell.n, boxop.cell_grid.n
        )));
    }
    let n_box = boxop.grid().n;
    if n_box != boxop.n_eps * cell.n {
        return Err(PerihomError::GridMismatch(format!(
            "box grid {} is not the {}-fold tiling of the cell grid {}",
            n_box, boxop.n_eps, cell.n
        )));
    }
    Ok(())
}

/// Build the two-scale ansatz field `wᵉ` on the box grid.
pub fn build_ansatz(
    profile: &AnalyticField,
    boxop: &BoxOperator,
    a: &CorrectorA,
    b: &CorrectorB,
) -> Result<PeriodicField> {
    let grid = boxop.grid();
    let d = grid.dimension;
    let cell = a.fields[0].grid;
    if b.fields[0].grid != cell {
        return Err(PerihomError::GridMismatch(
            "𝔄 and 𝔅 must live on the same cell grid".into(),
        ));
    }
    check_tiling(boxop, cell)?;
    let eps = boxop.eps;
    let l = grid.box_length;
    let n_c = cell.n;
    let nn = grid.node_count();
    let mut w = PeriodicField::zeros(grid, d);
    for flat in 0..nn {
        let mi = grid.multi_index(flat);
        let x = grid.coords(flat);
        let mut ci = vec![0usize; d];
        for k in 0..d {
            ci[k] = mi[k] % n_c;
        }
        let cell_flat = cell.flat_index(&ci);
        let (v, du, hu) = profile.eval_all(d, l, &x, 2)?;
        for i in 0..d {
            let mut val = v[i];
            // ε 𝔄(x/ε) Du(x)
            let mut corr1 = 0.0;
            for k in 0..d {
                for lx in 0..d {
                    corr1 += a.field(k, lx).get(i, cell_flat) * du.get(k, lx);
                }
            }
            val += eps * corr1;
            // ε² 𝔅(x/ε) D²u(x)
            let mut corr2 = 0.0;
            for j in 0..d {
                for k in 0..d {
                    for lx in 0..d {
                        corr2 += b.field(j, k, lx).get(i, cell_flat) * hu.get(j, k, lx);
                    }
                }
            }
            val += eps * eps * corr2;
            w.set(i, flat, val);
        }
    }
    Ok(w)
}

/// One consistency measurement: `‖Lᵉ wᵉ − 𝔠(x) D²u‖` in the discrete L²
/// norm, with the reference size `‖𝔠 D²u‖` for a relative reading.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ConsistencyRecord {
    pub profile: String,
    pub eps: f64,
    pub grid: usize,
    pub residual_l2: f64,
    pub reference_l2: f64,
    /// residual / reference, or the absolute residual when the reference
    /// vanishes (constant profiles).
    pub relative: f64,
}

/// Evaluate the consistency residual of the ansatz against the local limit.
pub fn consistency_residual(
    profile: &AnalyticField,
    boxop: &BoxOperator,
    a: &CorrectorA,
    b: &CorrectorB,
    eff: &EffectiveTensor,
    model: &CoefficientModel,
) -> Result<ConsistencyRecord> {
    let grid = boxop.grid();
    let d = grid.dimension;
    let l = grid.box_length;
    let w = build_ansatz(profile, boxop, a, b)?;
    let lw = boxop.apply_leps(&w)?;

    // Target: 𝔠(x) D²u(x) = s(x) · C̃ : D²u(x), pointwise analytic.
    let nn = grid.node_count();
    let mut target = PeriodicField::zeros(grid, d);
    for flat in 0..nn {
        let x = grid.coords(flat);
        let s = eff.scaling_at(&model.lambda0, &x)?;
        let hu = profile.hessian(d, l, &x)?;
        let applied = eff.ctilde.apply_to_hessian(&hu);
        for i in 0..d {
            target.set(i, flat, s * applied[i]);
        }
    }
    let mut diff = lw.clone();
    diff.axpy(-1.0, &target);
    let residual = diff.norm_l2();
    let reference = target.norm_l2();
    let relative = if reference > 0.0 {
        residual / reference
    } else {
        residual
    };
    Ok(ConsistencyRecord {
        profile: profile.name(),
        eps: boxop.eps,
        grid: grid.n,
        residual_l2: residual,
        reference_l2: reference,
        relative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{assemble_g_and_solve_b, assemble_h, solve_cell_a};
    use crate::cg::CgOptions;
    use crate::effective::effective_tensor;
    use crate::kernels::{KernelBuildOptions, KernelStack};
    use crate::model::{CoefField, KernelSpec};
    use crate::operators::NonlocalOperator;
    use crate::torus::sample_coefficient;

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let d = 2;
        let l = 2.0;
        let probe = [0.31, 1.47];
        let eps = 1e-5;
        for shape in [
            AnalyticField::TrigBasic,
            AnalyticField::TrigMixed,
            AnalyticField::Mode2,
            AnalyticField::GaussianBump { sigma_frac: 0.3 },
        ] {
            let g = shape.gradient(d, l, &probe).unwrap();
            let h = shape.hessian(d, l, &probe).unwrap();
            for k in 0..d {
                let mut xp = probe.to_vec();
                let mut xm = probe.to_vec();
                xp[k] += eps;
                xm[k] -= eps;
                let vp = shape.value(d, l, &xp).unwrap();
                let vm = shape.value(d, l, &xm).unwrap();
                let gp = shape.gradient(d, l, &xp).unwrap();
                let gm = shape.gradient(d, l, &xm).unwrap();
                for c in 0..d {
                    let fd = (vp[c] - vm[c]) / (2.0 * eps);
                    assert!(
                        (fd - g.get(c, k)).abs() < 1e-7,
                        "{}: ∂u_{c}/∂x_{k}: fd {fd} vs {}",
                        shape.name(),
                        g.get(c, k)
                    );
                    for lx in 0..d {
                        let fh = (gp.get(c, lx) - gm.get(c, lx)) / (2.0 * eps);
                        assert!(
                            (fh - h.get(c, lx, k)).abs() < 1e-6,
                            "{}: ∂²u_{c}/∂x_{lx}∂x_{k}: fd {fh} vs {}",
                            shape.name(),
                            h.get(c, lx, k)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn hessians_are_symmetric_and_periodic() {
        let d = 2;
        let l = 1.0;
        for shape in profile_library(d) {
            let h = shape.hessian(d, l, &[0.21, 0.77]).unwrap();
            for j in 0..d {
                for k in 0..d {
                    for lx in 0..d {
                        assert!(
                            (h.get(j, k, lx) - h.get(j, lx, k)).abs() < 1e-14,
                            "Hessian of {} not symmetric",
                            shape.name()
                        );
                    }
                }
            }
            // periodicity
            let v0 = shape.value(d, l, &[0.13, 0.88]).unwrap();
            let v1 = shape.value(d, l, &[0.13 + l, 0.88 - l]).unwrap();
            for c in 0..d {
                assert!(
                    (v0[c] - v1[c]).abs() < 1e-12,
                    "{} not periodic",
                    shape.name()
                );
            }
        }
    }

    struct Pipeline {
        boxop: BoxOperator,
        a: CorrectorA,
        b: CorrectorB,
        eff: EffectiveTensor,
        model: CoefficientModel,
    }

    fn run_pipeline(mu: CoefField, cell_n: usize, eps: f64) -> Pipeline {
        let d = 2;
        let spec = KernelSpec::radial_indicator(d, 0.4).unwrap();
        let model = CoefficientModel {
            dimension: d,
            mu,
            lambda0: CoefField::constant(1.0),
            lambda1: CoefField::constant(1.0),
            alpha1: 0.5,
            alpha2: 3.5,
        };
        let cell = TorusGrid::unit_cell(d, cell_n).unwrap();
        let opts = KernelBuildOptions {
            supersample: 4,
            max_rank: 4,
        };
        let stack = KernelStack::build(&spec, cell, &opts).unwrap();
        let mu_field = sample_coefficient(cell, &model.mu).unwrap();
        let lambda1 = sample_coefficient(cell, &model.lambda1).unwrap();
        let op = NonlocalOperator::new(stack, mu_field).unwrap();
        let cg = CgOptions {
            tol: crate::tolerances::CELL_CG_TOL,
            max_iter: 50_000,
            project_mean_zero: true,
        };
        let h = assemble_h(&op).unwrap();
        let a = solve_cell_a(&op, &h, &cg).unwrap();
        let ct = crate::cell::compute_ctilde_solvability(&op, &a).unwrap();
        let (_, b) = assemble_g_and_solve_b(&op, &lambda1, &a, &ct, &cg).unwrap();
        let boxop = BoxOperator::build(&spec, &model, cell_n, eps, 1.0, &opts).unwrap();
        let eff = effective_tensor(&ct, &op.stack.q0, &model, &lambda1, boxop.grid()).unwrap();
        Pipeline {
            boxop,
            a,
            b,
            eff,
            model,
        }
    }

    #[test]
    fn homogeneous_ansatz_reduces_to_u_and_residual_shrinks_with_eps() {
        let pl_quarter = run_pipeline(CoefField::constant(1.0), 16, 0.25);
        // Correctors vanish, so wᵉ = u exactly.
        let u = AnalyticField::TrigBasic;
        let w = build_ansatz(&u, &pl_quarter.boxop, &pl_quarter.a, &pl_quarter.b).unwrap();
        let u_sampled = u.sample(pl_quarter.boxop.grid()).unwrap();
        assert!(w.error_l2(&u_sampled) < 1e-10);

        let rec_quarter = consistency_residual(
            &u,
            &pl_quarter.boxop,
            &pl_quarter.a,
            &pl_quarter.b,
            &pl_quarter.eff,
            &pl_quarter.model,
        )
        .unwrap();
        let pl_half = run_pipeline(CoefField::constant(1.0), 16, 0.5);
        let rec_half = consistency_residual(
            &u,
            &pl_half.boxop,
            &pl_half.a,
            &pl_half.b,
            &pl_half.eff,
            &pl_half.model,
        )
        .unwrap();
        assert!(
            rec_quarter.relative < 5e-2,
            "relative residual at ε=1/4: {:.3e}",
            rec_quarter.relative
        );
        assert!(
            rec_quarter.residual_l2 < rec_half.residual_l2,
            "residual must shrink with ε: {:.3e} vs {:.3e}",
            rec_quarter.residual_l2,
            rec_half.residual_l2
        );

        // Constant profiles sit in the kernel of every term.
        let c = &profile_library(2)[0];
        let rec_const = consistency_residual(
            c,
            &pl_quarter.boxop,
            &pl_quarter.a,
            &pl_quarter.b,
            &pl_quarter.eff,
            &pl_quarter.model,
        )
        .unwrap();
        assert!(rec_const.residual_l2 < 1e-12);
    }

    #[test]
    fn corrector_term_scales_linearly_in_eps() {
        let mu = CoefField::CosineProduct {
            offset: 2.0,
            amplitude: 1.0,
            freq: vec![1.0, 0.0],
            phase: vec![0.0, 0.0],
        };
        let u = AnalyticField::TrigMixed;
        let pl4 = run_pipeline(mu.clone(), 16, 0.25);
        let w4 = build_ansatz(&u, &pl4.boxop, &pl4.a, &pl4.b).unwrap();
        let u4 = u.sample(pl4.boxop.grid()).unwrap();
        let d4 = w4.error_l2(&u4);
        let pl8 = run_pipeline(mu, 16, 0.125);
        let w8 = build_ansatz(&u, &pl8.boxop, &pl8.a, &pl8.b).unwrap();
        let u8 = u.sample(pl8.boxop.grid()).unwrap();
        let d8 = w8.error_l2(&u8);
        assert!(d4 > 1e-6, "corrector term must be visible");
        let slope = (d4 / d8).log2();
        assert!(
            (0.8..1.3).contains(&slope),
            "‖wᵉ − u‖ should scale like ε, slope {slope:.3}"
        );
    }

    #[test]
    fn mismatched_cell_grids_are_rejected() {
        let pl = run_pipeline(CoefField::constant(1.0), 16, 0.5);
        let other = run_pipeline(CoefField::constant(1.0), 8, 0.5);
        let u = AnalyticField::TrigBasic;
        let err = build_ansatz(&u, &pl.boxop, &other.a, &other.b);
        assert!(err.is_err());
        let msg = format!("{}", err.unwrap_err());
        assert!(msg.contains("exact node mapping"), "got: {msg}");
    }
}
