//! Model data: interaction kernels ρ, coefficient fields μ and λ = λ₀(x)λ₁(y),
//! their admissibility checks, and moment quadratures.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{PerihomError, Result};
use crate::tensors::{check_dimension, Tensor2, Tensor4};

/// Built-in kernel families. All are even and compactly supported except the
/// Gaussian, which is truncated at six widths (tail mass below 1e-15 of the
/// total, far under every tolerance used by the toolkit).
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum KernelFamily {
    /// Uniform density on the ball `|z| ≤ radius`, normalized to unit mass.
    RadialIndicator { radius: f64 },
    /// Unnormalized Gaussian `exp(−|z|²/width²)`.
    RadialGaussian { width: f64 },
    /// Uniform density on the double cone `{z: |z·axis| ≥ (1−beta)|z|}`
    /// intersected with the ball `|z| ≤ radius`, normalized to unit mass.
    /// `beta ∈ (0, 1)`; `axis` must be a unit vector.
    ConeRestricted {
        radius: f64,
        beta: f64,
        axis: Vec<f64>,
    },
}

/// Programmatic kernel for validation experiments (not serializable).
#[derive(Clone)]
pub struct CustomKernel {
    /// Density evaluation `z ↦ ρ(z)`.
    pub eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    /// Radius beyond which the density is treated as zero.
    pub truncation_radius: f64,
}

impl std::fmt::Debug for CustomKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CustomKernel")
            .field("truncation_radius", &self.truncation_radius)
            .finish()
    }
}

/// An interaction kernel ρ in dimension `d`.
///
/// When `custom` is set it overrides `family` for evaluation; custom kernels
/// exist so tests can probe the validators with deliberately inadmissible
/// densities, and they do not survive serialization.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct KernelSpec {
    pub dimension: usize,
    #[serde(flatten)]
    pub family: KernelFamily,
    #[serde(skip)]
    pub custom: Option<CustomKernel>,
}

/// Volume of the ball of radius `r` in dimension `d ∈ {1,2,3}`.
fn ball_volume(d: usize, r: f64) -> f64 {
    match d {
        1 => 2.0 * r,
        2 => std::f64::consts::PI * r * r,
        3 => 4.0 / 3.0 * std::f64::consts::PI * r * r * r,
        _ => unreachable!("dimension checked on construction"),
    }
}

/// Fraction of the unit sphere covered by the double cone
/// `{ω : |ω·axis| ≥ 1−β}`.
fn cone_angular_fraction(d: usize, beta: f64) -> f64 {
    let c = 1.0 - beta;
    match d {
        1 => 1.0, // only directions ±axis exist, both inside the cone
        2 => 2.0 * c.acos() / std::f64::consts::PI,
        3 => beta, // double spherical cap: 2·2π(1−cosθ)/4π with cosθ = 1−β
        _ => unreachable!("dimension checked on construction"),
    }
}

impl KernelSpec {
    pub fn radial_indicator(dimension: usize, radius: f64) -> Result<Self> {
        check_dimension(dimension)?;
        if radius <= 0.0 {
            return Err(PerihomError::InvalidArgument(
                "kernel radius must be positive".into(),
            ));
        }
        Ok(Self {
            dimension,
            family: KernelFamily::RadialIndicator { radius },
            custom: None,
        })
    }

    pub fn radial_gaussian(dimension: usize, width: f64) -> Result<Self> {
        check_dimension(dimension)?;
        if width <= 0.0 {
            return Err(PerihomError::InvalidArgument(
                "kernel width must be positive".into(),
            ));
        }
        Ok(Self {
            dimension,
            family: KernelFamily::RadialGaussian { width },
            custom: None,
        })
    }

    pub fn cone_restricted(dimension: usize, radius: f64, beta: f64, axis: Vec<f64>) -> Result<Self> {
        check_dimension(dimension)?;
        if radius <= 0.0 {
            return Err(PerihomError::InvalidArgument(
                "kernel radius must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&beta) || beta == 0.0 {
            return Err(PerihomError::InvalidArgument(
                "cone opening beta must lie in (0, 1)".into(),
            ));
        }
        if axis.len() != dimension {
            return Err(PerihomError::InvalidArgument(
                "cone axis length must equal the dimension".into(),
            ));
        }
        let norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(PerihomError::InvalidArgument(
                "cone axis must be a unit vector".into(),
            ));
        }
        Ok(Self {
            dimension,
            family: KernelFamily::ConeRestricted { radius, beta, axis },
            custom: None,
        })
    }

    /// Kernel defined by an arbitrary callable; used for negative tests of the
    /// validators. `truncation_radius` bounds the support used in quadrature
    /// and periodization.
    pub fn custom(
        dimension: usize,
        truncation_radius: f64,
        eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    ) -> Result<Self> {
        check_dimension(dimension)?;
        if truncation_radius <= 0.0 {
            return Err(PerihomError::InvalidArgument(
                "truncation radius must be positive".into(),
            ));
        }
        Ok(Self {
            dimension,
            // Placeholder family; evaluation is routed to the callable.
            family: KernelFamily::RadialIndicator {
                radius: truncation_radius,
            },
            custom: Some(CustomKernel {
                eval,
                truncation_radius,
            }),
        })
    }

    /// Density value ρ(z).
    pub fn evaluate(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dimension);
        if let Some(custom) = &self.custom {
            return (custom.eval)(z);
        }
        let r2: f64 = z.iter().map(|a| a * a).sum();
        match &self.family {
            KernelFamily::RadialIndicator { radius } => {
                if r2 <= radius * radius {
                    1.0 / ball_volume(self.dimension, *radius)
                } else {
                    0.0
                }
            }
            KernelFamily::RadialGaussian { width } => (-r2 / (width * width)).exp(),
            KernelFamily::ConeRestricted { radius, beta, axis } => {
                if r2 > radius * radius {
                    return 0.0;
                }
                let norm = r2.sqrt();
                // z = 0 is taken as inside the cone (limit along the axis);
                // the value there never influences moments or the matrix
                // kernel, which vanishes at the origin.
                let aligned = if norm == 0.0 {
                    true
                } else {
                    let dot: f64 = z.iter().zip(axis.iter()).map(|(a, b)| a * b).sum();
                    dot.abs() >= (1.0 - beta) * norm
                };
                if aligned {
                    let volume = cone_angular_fraction(self.dimension, *beta)
                        * ball_volume(self.dimension, *radius);
                    1.0 / volume
                } else {
                    0.0
                }
            }
        }
    }

    /// Radius beyond which the density is treated as identically zero.
    pub fn truncation_radius(&self) -> f64 {
        if let Some(custom) = &self.custom {
            return custom.truncation_radius;
        }
        match &self.family {
            KernelFamily::RadialIndicator { radius } => *radius,
            KernelFamily::RadialGaussian { width } => 6.0 * width,
            KernelFamily::ConeRestricted { radius, .. } => *radius,
        }
    }

    /// Closed-form moments (a₁, a₂) for the built-in families; `None` for
    /// custom kernels. Serves as the independent oracle for the quadrature.
    pub fn moments_closed_form(&self) -> Option<(f64, f64)> {
        if self.custom.is_some() {
            return None;
        }
        let d = self.dimension as f64;
        match &self.family {
            // Normalized uniform density on a star-shaped set scaled to
            // radius r has second moment d·r²/(d+2) regardless of the
            // angular profile.
            KernelFamily::RadialIndicator { radius } | KernelFamily::ConeRestricted { radius, .. } => {
                Some((1.0, d * radius * radius / (d + 2.0)))
            }
            KernelFamily::RadialGaussian { width } => {
                let a1 = (width * std::f64::consts::PI.sqrt()).powi(self.dimension as i32);
                let a2 = d * width * width / 2.0 * a1;
                Some((a1, a2))
            }
        }
    }
}

/// Moments of a kernel computed by midpoint quadrature at two resolutions.
///
/// `a1_error` and `a2_error` are the absolute differences between the fine
/// and half-resolution values — a conservative two-resolution error estimate
/// (no extrapolation factor is divided out, since indicator-type kernels
/// converge at first order in the cell size rather than second).
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub a1: f64,
    pub a2: f64,
    pub a1_error: f64,
    pub a2_error: f64,
    pub resolution: usize,
    pub truncation_radius: f64,
}

/// Midpoint-quadrature pass over `[−R, R]^d` with `m` cells per axis,
/// accumulating `Σ w·ρ(z)·f(z)` for the requested integrand powers.
fn moment_pass(spec: &KernelSpec, m: usize) -> (f64, f64) {
    let d = spec.dimension;
    let r = spec.truncation_radius();
    let h = 2.0 * r / m as f64;
    let w = h.powi(d as i32);
    let mut a1 = 0.0;
    let mut a2 = 0.0;
    let mut z = vec![0.0f64; d];
    let total = m.pow(d as u32);
    for flat in 0..total {
        let mut rem = flat;
        for zc in z.iter_mut() {
            let i = rem % m;
            rem /= m;
            *zc = -r + (i as f64 + 0.5) * h;
        }
        let rho = spec.evaluate(&z);
        if rho != 0.0 {
            let r2: f64 = z.iter().map(|a| a * a).sum();
            a1 += w * rho;
            a2 += w * rho * r2;
        }
    }
    (a1, a2)
}

/// First and second moments `a₁ = ∫ρ`, `a₂ = ∫|z|²ρ` by midpoint quadrature,
/// with a two-resolution error estimate. `resolution` is the number of cells
/// per axis at the fine level and must be even and at least 4.
pub fn kernel_moments(spec: &KernelSpec, resolution: usize) -> Result<MomentReport> {
    if resolution < 4 || resolution % 2 != 0 {
        return Err(PerihomError::InvalidArgument(
            "moment quadrature resolution must be even and at least 4".into(),
        ));
    }
    let (a1_f, a2_f) = moment_pass(spec, resolution);
    let (a1_c, a2_c) = moment_pass(spec, resolution / 2);
    Ok(MomentReport {
        a1: a1_f,
        a2: a2_f,
        a1_error: (a1_f - a1_c).abs(),
        a2_error: (a2_f - a2_c).abs(),
        resolution,
        truncation_radius: spec.truncation_radius(),
    })
}

/// Quartic directional moment `∫ ρ(z) (z⊗z⊗z⊗z)/|z|² dz` by midpoint
/// quadrature. Its Voigt spectrum quantifies the kernel's directional
/// nondegeneracy: the smallest eigenvalue is the worst-case quartic form over
/// unit symmetric matrices, and it is positive exactly when the kernel spans
/// enough directions for the effective tensor to be elliptic.
pub fn quartic_moment_matrix(spec: &KernelSpec, resolution: usize) -> Result<Tensor4> {
    if resolution < 4 || resolution % 2 != 0 {
        return Err(PerihomError::InvalidArgument(
            "moment quadrature resolution must be even and at least 4".into(),
        ));
    }
    let d = spec.dimension;
    let r = spec.truncation_radius();
    let m = resolution;
    let h = 2.0 * r / m as f64;
    let w = h.powi(d as i32);
    let mut q = Tensor4::zeros(d);
    let mut z = vec![0.0f64; d];
    let total = m.pow(d as u32);
    for flat in 0..total {
        let mut rem = flat;
        for zc in z.iter_mut() {
            let i = rem % m;
            rem /= m;
            *zc = -r + (i as f64 + 0.5) * h;
        }
        let rho = spec.evaluate(&z);
        if rho == 0.0 {
            continue;
        }
        let r2: f64 = z.iter().map(|a| a * a).sum();
        if r2 == 0.0 {
            continue;
        }
        let s = w * rho / r2;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        q.add_to(i, j, k, l, s * z[i] * z[j] * z[k] * z[l]);
                    }
                }
            }
        }
    }
    Ok(q)
}

/// Rescaled kernel `ρ_ε(z) = ε^{−d} ρ(z/ε)`.
pub fn rho_eps(spec: &KernelSpec, eps: f64, z: &[f64]) -> f64 {
    let d = spec.dimension as i32;
    let scaled: Vec<f64> = z.iter().map(|a| a / eps).collect();
    eps.powi(-d) * spec.evaluate(&scaled)
}

/// A scalar coefficient field on the unit cell or the macroscopic box.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CoefField {
    Constant {
        value: f64,
    },
    /// `offset + amplitude · Π_i cos(2π freq_i x_i + phase_i)`.
    CosineProduct {
        offset: f64,
        amplitude: f64,
        freq: Vec<f64>,
        phase: Vec<f64>,
    },
    /// Pointwise reciprocal of another field.
    Reciprocal {
        inner: Box<CoefField>,
    },
    /// Expression in variables `y1`, `y2`, `y3` (and constant `pi`),
    /// evaluated with the `meval` parser.
    Expr {
        expr: String,
    },
}

impl CoefField {
    pub fn constant(value: f64) -> Self {
        CoefField::Constant { value }
    }

    /// Evaluate at a point (length must match the model dimension).
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            CoefField::Constant { value } => Ok(*value),
            CoefField::CosineProduct {
                offset,
                amplitude,
                freq,
                phase,
            } => {
                if freq.len() != x.len() || phase.len() != x.len() {
                    return Err(PerihomError::InvalidArgument(
                        "cosine-product freq/phase length must equal the dimension".into(),
                    ));
                }
                let mut p = 1.0;
                for i in 0..x.len() {
                    p *= (2.0 * std::f64::consts::PI * freq[i] * x[i] + phase[i]).cos();
                }
                Ok(offset + amplitude * p)
            }
            CoefField::Reciprocal { inner } => {
                let v = inner.eval(x)?;
                if v == 0.0 {
                    return Err(PerihomError::InvalidArgument(
                        "reciprocal coefficient hit a zero of its inner field".into(),
                    ));
                }
                Ok(1.0 / v)
            }
            CoefField::Expr { expr } => {
                let parsed: meval::Expr = expr
                    .parse()
                    .map_err(|e| PerihomError::InvalidArgument(format!("bad expression: {e}")))?;
                let mut ctx = meval::Context::new();
                for (i, xi) in x.iter().enumerate() {
                    ctx.var(format!("y{}", i + 1), *xi);
                }
                parsed
                    .eval_with_context(ctx)
                    .map_err(|e| PerihomError::InvalidArgument(format!("bad expression: {e}")))
            }
        }
    }
}

/// Coefficients of the heterogeneous operator: the state-based weight μ(y)
/// on the unit cell and the separable prefactor λ(x, y) = λ₀(x) λ₁(y), with
/// the uniform bounds `alpha1 ≤ μ, λ ≤ alpha2` they are required to satisfy.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct CoefficientModel {
    pub dimension: usize,
    pub mu: CoefField,
    pub lambda0: CoefField,
    pub lambda1: CoefField,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl CoefficientModel {
    /// Model with μ ≡ λ ≡ 1.
    pub fn homogeneous(dimension: usize) -> Self {
        CoefficientModel {
            dimension,
            mu: CoefField::constant(1.0),
            lambda0: CoefField::constant(1.0),
            lambda1: CoefField::constant(1.0),
            alpha1: 1.0,
            alpha2: 1.0,
        }
    }

    /// λ(x, y) = λ₀(x) λ₁(y).
    pub fn lambda(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.lambda0.eval(x)? * self.lambda1.eval(y)?)
    }

    /// Symmetrized two-point weight `½(μ(y) + μ(q))`.
    pub fn mu_sym(&self, y: &[f64], q: &[f64]) -> Result<f64> {
        Ok(0.5 * (self.mu.eval(y)? + self.mu.eval(q)?))
    }
}

/// Outcome of the admissibility checks on a kernel/coefficient pair.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ValidationReport {
    /// ρ ≥ 0 at every sampled point.
    pub density_nonnegative: bool,
    /// ρ(z) = ρ(−z) at every sampled point (max deviation recorded).
    pub density_even: bool,
    pub evenness_deviation: f64,
    /// a₁ > 0 with its quadrature value.
    pub mass_positive: bool,
    pub moments: MomentReport,
    /// Smallest Voigt eigenvalue of the quartic directional moment; must be
    /// positive for directional nondegeneracy.
    pub quartic_min_eigenvalue: f64,
    pub directionally_nondegenerate: bool,
    /// μ and λ stay inside [alpha1, alpha2] on the sample grid.
    pub coefficients_bounded: bool,
    pub coefficient_min: f64,
    pub coefficient_max: f64,
    pub ok: bool,
}

/// Check (A1)–(A3): density nonnegativity/evenness and finite positive
/// moments, directional nondegeneracy of the quartic moment, and uniform
/// two-sided bounds on μ and λ. Sampling uses `resolution` cells per axis
/// for the kernel quadratures and a `resolution`-point grid per axis for the
/// coefficient bounds; a small relative slack (1e-12) absorbs roundoff at
/// points where a coefficient exactly attains a bound.
pub fn validate_assumptions(
    kernel: &KernelSpec,
    model: &CoefficientModel,
    resolution: usize,
) -> Result<ValidationReport> {
    if kernel.dimension != model.dimension {
        return Err(PerihomError::GridMismatch(format!(
            "kernel dimension {} vs coefficient dimension {}",
            kernel.dimension, model.dimension
        )));
    }
    if !(model.alpha1 > 0.0 && model.alpha2 >= model.alpha1) {
        return Err(PerihomError::InvalidArgument(
            "bounds must satisfy 0 < alpha1 <= alpha2".into(),
        ));
    }
    let d = kernel.dimension;
    let r = kernel.truncation_radius();
    let m = resolution.max(8) & !1usize; // even, at least 8
    let h = 2.0 * r / m as f64;

    // Density sign and evenness on the quadrature lattice.
    let mut nonneg = true;
    let mut even_dev = 0.0f64;
    let mut z = vec![0.0f64; d];
    let mut zneg = vec![0.0f64; d];
    for flat in 0..m.pow(d as u32) {
        let mut rem = flat;
        for zc in z.iter_mut() {
            let i = rem % m;
            rem /= m;
            *zc = -r + (i as f64 + 0.5) * h;
        }
        let v = kernel.evaluate(&z);
        if v < 0.0 {
            nonneg = false;
        }
        for (a, b) in zneg.iter_mut().zip(z.iter()) {
            *a = -b;
        }
        even_dev = even_dev.max((v - kernel.evaluate(&zneg)).abs());
    }
    let moments = kernel_moments(kernel, m)?;
    let quartic = quartic_moment_matrix(kernel, m)?;
    let qmin = quartic.voigt_eigenvalues()[0];

    // Coefficient bounds on sample grids (cell for μ and λ₁ jointly with a
    // unit box for λ₀; the separable product is sampled on the diagonal
    // grid pairs, which covers the full range because the factors are
    // independent).
    let slack = 1e-12 * model.alpha2.max(1.0);
    let mut cmin = f64::INFINITY;
    let mut cmax = f64::NEG_INFINITY;
    let mut y = vec![0.0f64; d];
    let grid = m.min(64);
    let mut mu_vals = Vec::with_capacity(grid.pow(d as u32));
    let mut l1_vals = Vec::with_capacity(grid.pow(d as u32));
    let mut l0_vals = Vec::with_capacity(grid.pow(d as u32));
    for flat in 0..grid.pow(d as u32) {
        let mut rem = flat;
        for yc in y.iter_mut() {
            let i = rem % grid;
            rem /= grid;
            *yc = i as f64 / grid as f64;
        }
        mu_vals.push(model.mu.eval(&y)?);
        l1_vals.push(model.lambda1.eval(&y)?);
        l0_vals.push(model.lambda0.eval(&y)?);
    }
    for &v in &mu_vals {
        cmin = cmin.min(v);
        cmax = cmax.max(v);
    }
    let (l0_min, l0_max) = l0_vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let (l1_min, l1_max) = l1_vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    // Extremes of the separable product over all (x, y) pairs.
    for prod in [
        l0_min * l1_min,
        l0_min * l1_max,
        l0_max * l1_min,
        l0_max * l1_max,
    ] {
        cmin = cmin.min(prod);
        cmax = cmax.max(prod);
    }
    let bounded = cmin >= model.alpha1 - slack && cmax <= model.alpha2 + slack && cmin > 0.0;

    let report = ValidationReport {
        density_nonnegative: nonneg,
        density_even: even_dev <= 1e-12,
        evenness_deviation: even_dev,
        mass_positive: moments.a1 > 0.0,
        quartic_min_eigenvalue: qmin,
        directionally_nondegenerate: qmin > 0.0,
        coefficients_bounded: bounded,
        coefficient_min: cmin,
        coefficient_max: cmax,
        ok: nonneg
            && even_dev <= 1e-12
            && moments.a1 > 0.0
            && qmin > 0.0
            && bounded,
        moments,
    };
    Ok(report)
}

/// Second directional moment `∫ ρ(z) (z⊗z)/|z|² dz` (its trace equals a₁).
pub fn second_moment_matrix(spec: &KernelSpec, resolution: usize) -> Result<Tensor2> {
    if resolution < 4 || resolution % 2 != 0 {
        return Err(PerihomError::InvalidArgument(
            "moment quadrature resolution must be even and at least 4".into(),
        ));
    }
    let d = spec.dimension;
    let r = spec.truncation_radius();
    let m = resolution;
    let h = 2.0 * r / m as f64;
    let w = h.powi(d as i32);
    let mut k0 = Tensor2::zeros(d);
    let mut z = vec![0.0f64; d];
    for flat in 0..m.pow(d as u32) {
        let mut rem = flat;
        for zc in z.iter_mut() {
            let i = rem % m;
            rem /= m;
            *zc = -r + (i as f64 + 0.5) * h;
        }
        let rho = spec.evaluate(&z);
        if rho == 0.0 {
            continue;
        }
        let r2: f64 = z.iter().map(|a| a * a).sum();
        if r2 == 0.0 {
            continue;
        }
        let s = w * rho / r2;
        for i in 0..d {
            for j in 0..d {
                k0.add_to(i, j, s * z[i] * z[j]);
            }
        }
    }
    Ok(k0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn indicator_moments_match_closed_form() {
        let spec = KernelSpec::radial_indicator(2, 0.4).unwrap();
        let (a1, a2) = spec.moments_closed_form().unwrap();
        assert_abs_diff_eq!(a1, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a2, 2.0 * 0.16 / 4.0, epsilon = 1e-15);
        let report = kernel_moments(&spec, 256).unwrap();
        assert!((report.a1 - a1).abs() < 5e-3, "a1 = {}", report.a1);
        assert!((report.a2 - a2).abs() < 5e-3, "a2 = {}", report.a2);
        assert!(report.a1_error < 1e-2);
    }

    #[test]
    fn gaussian_moments_match_closed_form() {
        let spec = KernelSpec::radial_gaussian(2, 0.15).unwrap();
        let (a1, a2) = spec.moments_closed_form().unwrap();
        let report = kernel_moments(&spec, 256).unwrap();
        // Smooth integrand: midpoint quadrature converges fast.
        assert_abs_diff_eq!(report.a1, a1, epsilon = 1e-8);
        assert_abs_diff_eq!(report.a2, a2, epsilon = 1e-8);
    }

    #[test]
    fn cone_moments_match_closed_form() {
        let spec = KernelSpec::cone_restricted(2, 0.4, 0.5, vec![1.0, 0.0]).unwrap();
        let (a1, a2) = spec.moments_closed_form().unwrap();
        assert_abs_diff_eq!(a1, 1.0, epsilon = 1e-15);
        let report = kernel_moments(&spec, 512).unwrap();
        assert!((report.a1 - a1).abs() < 1e-2, "a1 = {}", report.a1);
        assert!((report.a2 - a2).abs() < 1e-2, "a2 = {}", report.a2);
    }

    #[test]
    fn second_moment_trace_equals_mass() {
        for spec in [
            KernelSpec::radial_indicator(2, 0.4).unwrap(),
            KernelSpec::cone_restricted(2, 0.4, 0.5, vec![1.0, 0.0]).unwrap(),
        ] {
            let k0 = second_moment_matrix(&spec, 512).unwrap();
            let report = kernel_moments(&spec, 512).unwrap();
            // Identical sample sets; only summation order differs.
            assert_abs_diff_eq!(k0.trace(), report.a1, epsilon = 1e-9);
        }
    }

    #[test]
    fn isotropic_quartic_moment_in_2d() {
        // For a radial kernel in d=2 the quartic directional moment is
        // a₂/8 · (δδ + δδ + δδ): Q_1111 = 3a₂/8, Q_1122 = Q_1212 = a₂/8.
        let spec = KernelSpec::radial_indicator(2, 0.4).unwrap();
        let q = quartic_moment_matrix(&spec, 512).unwrap();
        let a2 = kernel_moments(&spec, 512).unwrap().a2;
        assert!((q.get(0, 0, 0, 0) - 3.0 * a2 / 8.0).abs() < 3e-3);
        assert!((q.get(0, 0, 1, 1) - a2 / 8.0).abs() < 3e-3);
        assert!((q.get(0, 1, 0, 1) - a2 / 8.0).abs() < 3e-3);
        // Full contraction Σ Q_iijj... over paired indices equals a₂.
        let mut paired = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                paired += q.get(i, i, j, j);
            }
        }
        assert!((paired - a2).abs() < 5e-3);
    }

    #[test]
    fn validate_accepts_admissible_pair_and_rejects_odd_kernel() {
        let kernel = KernelSpec::radial_indicator(2, 0.4).unwrap();
        let model = CoefficientModel {
            dimension: 2,
            mu: CoefField::CosineProduct {
                offset: 2.0,
                amplitude: 1.0,
                freq: vec![1.0, 0.0],
                phase: vec![0.0, 0.0],
            },
            lambda0: CoefField::constant(1.0),
            lambda1: CoefField::Reciprocal {
                inner: Box::new(CoefField::CosineProduct {
                    offset: 2.0,
                    amplitude: 1.0,
                    freq: vec![1.0, 0.0],
                    phase: vec![0.0, 0.0],
                }),
            },
            alpha1: 1.0 / 6.0,
            alpha2: 3.0,
        };
        let report = validate_assumptions(&kernel, &model, 64).unwrap();
        assert!(report.ok, "{report:?}");

        // An odd (signed) kernel must be rejected on both counts.
        let odd = KernelSpec::custom(
            2,
            0.5,
            Arc::new(|z: &[f64]| if z[0].abs() <= 0.5 && z[1].abs() <= 0.5 { z[0] } else { 0.0 }),
        )
        .unwrap();
        let model2 = CoefficientModel::homogeneous(2);
        let report2 = validate_assumptions(&odd, &model2, 64).unwrap();
        assert!(!report2.density_nonnegative);
        assert!(!report2.density_even);
        assert!(!report2.ok);
    }

    #[test]
    fn validate_flags_degenerate_direction_set() {
        // A kernel supported on the x-axis slab only cannot control shear in
        // the orthogonal direction: the quartic Voigt minimum vanishes.
        let slab = KernelSpec::custom(
            2,
            0.5,
            Arc::new(|z: &[f64]| {
                if z[0].abs() <= 0.5 && z[1].abs() <= 1e-9 {
                    1.0
                } else {
                    0.0
                }
            }),
        )
        .unwrap();
        let model = CoefficientModel::homogeneous(2);
        let report = validate_assumptions(&slab, &model, 64).unwrap();
        // The midpoint lattice misses the measure-zero slab entirely, so the
        // kernel shows zero mass — flagged either way.
        assert!(!report.ok);
    }

    #[test]
    fn coefficient_bound_violation_is_flagged() {
        let kernel = KernelSpec::radial_indicator(2, 0.4).unwrap();
        let mut model = CoefficientModel::homogeneous(2);
        model.alpha1 = 1.5; // claims μ ≥ 1.5 but μ ≡ 1
        model.alpha2 = 3.0;
        let report = validate_assumptions(&kernel, &model, 32).unwrap();
        assert!(!report.coefficients_bounded);
        assert!(!report.ok);
    }

    #[test]
    fn expr_field_evaluates() {
        let f = CoefField::Expr {
            expr: "1/(2+cos(2*pi*y1))".into(),
        };
        let v = f.eval(&[0.25, 0.0]).unwrap();
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        let g = CoefField::Reciprocal {
            inner: Box::new(CoefField::CosineProduct {
                offset: 2.0,
                amplitude: 1.0,
                freq: vec![1.0, 0.0],
                phase: vec![0.0, 0.0],
            }),
        };
        assert_abs_diff_eq!(g.eval(&[0.25, 0.0]).unwrap(), v, epsilon = 1e-12);
    }

    #[test]
    fn kernel_spec_round_trips_through_json() {
        let spec = KernelSpec::cone_restricted(2, 0.4, 0.5, vec![1.0, 0.0]).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        let back: KernelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back.family, spec.family);
        assert_eq!(back.dimension, 2);
    }
}
