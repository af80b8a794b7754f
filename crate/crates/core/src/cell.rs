//! The two auxiliary cell problems on the periodic unit cell and the two
//! independent formulas for the constant effective tensor C̃.
//!
//! With `S = 𝕂 − 𝔾` (see [`crate::operators`]) the first cell problem reads
//! `S aᵏˡ = hᵏˡ` with data
//! `hᵏˡ_i(q) = ½ μ(q) H̄₀_{ikl} + ½ (H̄_{ikl} ∗ μ)(q)
//!          = h^d Σ_y μ_s(q,y) H̄_{ikl}(q−y)`,
//! solvable because `h` has zero mean (H̄ is odd). Its mean-zero solutions
//! form the third-order corrector 𝔄.
//!
//! C̃ is then computed two ways:
//! - solvability route: `c̃^{ijkl} = ½ ∫ W^Q_{ijkl} − ∫ Σ_p M_{ijp} aᵏˡ_p`
//!   with `W^Q_{ijkl}(q) = ½ μ(q) Q̄₀_{ijkl} + ½ (Q̄_{ijkl} ∗ μ)(q)` and the
//!   correlation field `M_{ijp}(y) = ½ corr(H̄_{ijp}, μ)(y) + ½ μ(y) H̄₀_{ijp}`;
//! - quadratic route: the manifestly symmetric double sum
//!   `c̃^{ijkl} = ½ h^{2d} Σ_{q,y} μ_s ρ̄-weighted
//!    [Δ_iΔ_j + Δaᵏˡ··Δ][Δ_kΔ_l + Δa^{ij}··Δ]/|Δ|²` expanded into the
//!   periodized kernels Q̄, H̄, K̄ with `Δa = a(q) − a(y)`.
//!
//! Their equality is an identity of the discrete system (it reduces to
//! `⟨h^{ij}, aᵏˡ⟩ = ⟨hᵏˡ, a^{ij}⟩`, self-adjointness of S), so agreement to
//! near roundoff is a strong end-to-end functional test.
//!
//! The second cell problem `S bʲᵏˡ = gʲᵏˡ` has data
//! `gʲᵏˡ_i(q) = Hm⁻¹ Γʲᵏˡ_i / λ₁(q) − ½ W^Q_{ijkl}(q)
//!            + ½ [R_k(aʲˡ) + R_l(aʲᵏ)]_i(q)`,
//! `R_k(w)_i(q) = ½ μ(q) Σ_p (H̄_{ipk} ∗ w_p)(q) + ½ Σ_p (H̄_{ipk} ∗ (μ w)_p)(q)`,
//! `Γʲᵏˡ_i = ½ (c̃^{ikjl} + c̃^{iljk})`, `Hm = ∫ 1/λ₁`.
//! Its mean vanishes exactly when Γ comes from the solvability-route C̃ —
//! the discrete Fredholm condition — which the tests verify both positively
//! and with a perturbed-C̃ negative control.

use serde::{Deserialize, Serialize};

use crate::cg::{cg_solve, CgOptions, CgReport};
use crate::error::{PerihomError, Result};
use crate::kernels::{convolve_from_hats, correlate_from_hats, C64};
use crate::operators::NonlocalOperator;
use crate::tensors::{sym_pairs, Tensor4};
use crate::torus::PeriodicField;

/// Data of the first cell problem: one vector field hᵏˡ per symmetric pair
/// (k ≤ l), with its per-component means (Fredholm check) recorded before
/// any solve.
#[derive(Debug)]
pub struct CellDataH {
    pub pairs: Vec<(usize, usize)>,
    pub fields: Vec<PeriodicField>,
    /// `means[pair][i]`, recorded pre-solve.
    pub means: Vec<Vec<f64>>,
    pub max_abs_mean: f64,
    pub max_abs: f64,
}

/// The third-order corrector 𝔄: mean-zero solutions aᵏˡ of `S aᵏˡ = hᵏˡ`.
#[derive(Debug)]
pub struct CorrectorA {
    pub pairs: Vec<(usize, usize)>,
    pub fields: Vec<PeriodicField>,
    pub reports: Vec<CgReport>,
}

impl CorrectorA {
    pub fn field(&self, k: usize, l: usize) -> &PeriodicField {
        &self.fields[crate::tensors::sym_pair_index(self.fields[0].components, k, l)]
    }

    /// Largest absolute nodal value over all pairs and components.
    pub fn max_abs(&self) -> f64 {
        self.fields.iter().fold(0.0f64, |m, f| m.max(f.max_abs()))
    }
}

/// Data of the second cell problem, per triple (j, k ≤ l).
#[derive(Debug)]
pub struct CellDataG {
    pub triples: Vec<(usize, usize, usize)>,
    pub fields: Vec<PeriodicField>,
    pub means: Vec<Vec<f64>>,
    pub max_abs_mean: f64,
}

/// The fourth-order corrector 𝔅: mean-zero solutions bʲᵏˡ of `S bʲᵏˡ = gʲᵏˡ`.
#[derive(Debug)]
pub struct CorrectorB {
    pub triples: Vec<(usize, usize, usize)>,
    pub fields: Vec<PeriodicField>,
    pub reports: Vec<CgReport>,
}

impl CorrectorB {
    pub fn field(&self, j: usize, k: usize, l: usize) -> &PeriodicField {
        let d = self.fields[0].components;
        let (k, l) = if k <= l { (k, l) } else { (l, k) };
        let idx = j * (d * (d + 1) / 2) + crate::tensors::sym_pair_index(d, k, l);
        &self.fields[idx]
    }

    pub fn max_abs(&self) -> f64 {
        self.fields.iter().fold(0.0f64, |m, f| m.max(f.max_abs()))
    }
}

/// Residual report for the first cell problem: `Ψᵏˡ = S aᵏˡ − hᵏˡ`
/// re-evaluated with a fresh operator application.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct PsiReport {
    pub per_pair_max: Vec<f64>,
    pub max_abs: f64,
    /// Scale of the data, `max |hᵏˡ|`.
    pub data_scale: f64,
}

/// Constancy report for the second cell problem: `λ₁(q) Φʲᵏˡ(q)` must be the
/// constant `Hm⁻¹ Γʲᵏˡ`, with Φ re-assembled from a fresh operator
/// application of bʲᵏˡ (not from the stored g).
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct PhiReport {
    pub per_triple_max: Vec<f64>,
    pub max_deviation: f64,
    /// Scale of the constants, `max |Hm⁻¹ Γ|`.
    pub constant_scale: f64,
}

/// Both C̃ computations and their agreement.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct CTildeReport {
    pub dimension: usize,
    pub solvability: Tensor4,
    pub quadratic: Tensor4,
    pub max_abs_diff: f64,
    /// `max_abs_diff / ‖C̃_solvability‖_∞`.
    pub rel_diff: f64,
    pub gate: f64,
    pub pass: bool,
}

/// Discrete mean of `1/λ₁` over the unit cell (the harmonic-mean factor
/// denominator; the fast-variable part of `∫ 1/λ(x, y) dy`).
pub fn mean_inv_lambda1(lambda1: &PeriodicField) -> Result<f64> {
    if lambda1.components != 1 {
        return Err(PerihomError::InvalidArgument(
            "λ₁ must be a scalar field".into(),
        ));
    }
    let nn = lambda1.node_count() as f64;
    let mut s = 0.0;
    for &v in lambda1.component(0) {
        if v <= 0.0 {
            return Err(PerihomError::Validation(
                "λ₁ must be strictly positive".into(),
            ));
        }
        s += 1.0 / v;
    }
    Ok(s / nn)
}

/// `Γʲᵏˡ_i = ½ (c̃^{ikjl} + c̃^{iljk})`, the constant forcing of the second
/// cell problem.
pub fn gamma_component(ctilde: &Tensor4, j: usize, k: usize, l: usize, i: usize) -> f64 {
    0.5 * (ctilde.get(i, k, j, l) + ctilde.get(i, l, j, k))
}

/// Assemble the first cell problem's data hᵏˡ through the convolution path.
pub fn assemble_h(op: &NonlocalOperator) -> Result<CellDataH> {
    let stack = &op.stack;
    if stack.max_rank < 3 {
        return Err(PerihomError::InvalidArgument(
            "cell problems need a kernel stack built to rank ≥ 3".into(),
        ));
    }
    let d = stack.dimension;
    let grid = stack.grid;
    let nn = grid.node_count();
    let fft = &stack.fft;
    let mu = op.mu.component(0);
    let mu_hat = fft.forward(mu);
    let pairs = sym_pairs(d);
    let mut fields = Vec::with_capacity(pairs.len());
    let mut means = Vec::with_capacity(pairs.len());
    let mut max_mean = 0.0f64;
    let mut max_abs = 0.0f64;
    for &(k, l) in &pairs {
        let mut f = PeriodicField::zeros(grid, d);
        for i in 0..d {
            let slot = stack.h3_slot(i, k, l);
            let conv = convolve_from_hats(&grid, fft, &stack.h3_hat[slot], &mu_hat);
            let h0 = stack.h0.get(i, k, l);
            let fi = f.component_mut(i);
            for q in 0..nn {
                fi[q] = 0.5 * mu[q] * h0 + 0.5 * conv[q];
            }
        }
        let m = f.mean();
        for &v in &m {
            max_mean = max_mean.max(v.abs());
        }
        max_abs = max_abs.max(f.max_abs());
        means.push(m);
        fields.push(f);
    }
    Ok(CellDataH {
        pairs,
        fields,
        means,
        max_abs_mean: max_mean,
        max_abs,
    })
}

/// Solve one Fredholm system `S x = rhs` on mean-zero fields by CG applied
/// to the positive semidefinite `−S` with right-hand side `−rhs`.
fn solve_fredholm(
    op: &NonlocalOperator,
    rhs: &PeriodicField,
    cg: &CgOptions,
    what: &str,
) -> Result<(PeriodicField, CgReport)> {
    let mean = rhs.mean();
    let scale = rhs.max_abs().max(1.0);
    let worst = mean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if worst > crate::tolerances::FREDHOLM_TOL * scale {
        return Err(PerihomError::Solvability(format!(
            "{what}: right-hand side mean {worst:.3e} violates the Fredholm condition"
        )));
    }
    let mut projected = rhs.clone();
    projected.project_mean_zero();
    projected.scale(-1.0);
    let apply = |v: &PeriodicField| -> PeriodicField {
        let mut s = op
            .apply_k_minus_g(v)
            .expect("operator application on matching grids");
        s.scale(-1.0);
        s
    };
    let mut opts = *cg;
    opts.project_mean_zero = true;
    let (mut x, report) = cg_solve(&apply, &projected, None, None, None, &opts)?;
    if !report.converged {
        return Err(PerihomError::Convergence(format!(
            "{what}: CG stalled at residual {:.3e} after {} iterations",
            report.residual, report.iterations
        )));
    }
    x.project_mean_zero();
    Ok((x, report))
}

/// Solve the first cell problem for every symmetric pair.
pub fn solve_cell_a(op: &NonlocalOperator, h: &CellDataH, cg: &CgOptions) -> Result<CorrectorA> {
    let mut fields = Vec::with_capacity(h.fields.len());
    let mut reports = Vec::with_capacity(h.fields.len());
    for (p, rhs) in h.fields.iter().enumerate() {
        let (k, l) = h.pairs[p];
        let (x, report) = solve_fredholm(op, rhs, cg, &format!("cell problem A ({k}{l})"))?;
        fields.push(x);
        reports.push(report);
    }
    Ok(CorrectorA {
        pairs: h.pairs.clone(),
        fields,
        reports,
    })
}

/// Re-evaluate the first cell problem's residual `S aᵏˡ − hᵏˡ` with a fresh
/// operator application.
pub fn check_psi_zero(op: &NonlocalOperator, h: &CellDataH, a: &CorrectorA) -> Result<PsiReport> {
    let mut per_pair = Vec::with_capacity(h.fields.len());
    let mut max_abs = 0.0f64;
    for (p, af) in a.fields.iter().enumerate() {
        let mut r = op.apply_k_minus_g(af)?;
        r.axpy(-1.0, &h.fields[p]);
        let m = r.max_abs();
        per_pair.push(m);
        max_abs = max_abs.max(m);
    }
    Ok(PsiReport {
        per_pair_max: per_pair,
        max_abs,
        data_scale: h.max_abs,
    })
}

/// The pointwise field `W^Q_{ijkl}(q)` per sorted-quadruple slot.
fn wq_field(op: &NonlocalOperator) -> Result<Vec<Vec<f64>>> {
    let stack = &op.stack;
    if stack.max_rank < 4 {
        return Err(PerihomError::InvalidArgument(
            "C̃ requires a kernel stack built to rank 4".into(),
        ));
    }
    let grid = stack.grid;
    let nn = grid.node_count();
    let fft = &stack.fft;
    let mu = op.mu.component(0);
    let mu_hat = fft.forward(mu);
    let quads = stack.quads();
    let mut out = Vec::with_capacity(quads.len());
    for (slot, quad) in quads.iter().enumerate() {
        let conv = convolve_from_hats(&grid, fft, &stack.q4_hat[slot], &mu_hat);
        let q0 = stack.q0.get(quad[0], quad[1], quad[2], quad[3]);
        let mut arr = vec![0.0; nn];
        for q in 0..nn {
            arr[q] = 0.5 * mu[q] * q0 + 0.5 * conv[q];
        }
        out.push(arr);
    }
    Ok(out)
}

/// The correlation field `M_{ijp}(y)` per sorted-triple slot. This is the
/// one place the correlation theorem (conjugated multiplier) is exercised,
/// deliberately distinct from the convolution path used for h.
fn m_field(op: &NonlocalOperator) -> Result<Vec<Vec<f64>>> {
    let stack = &op.stack;
    let grid = stack.grid;
    let nn = grid.node_count();
    let fft = &stack.fft;
    let mu = op.mu.component(0);
    let mu_hat = fft.forward(mu);
    let triples = stack.triples();
    let mut out = Vec::with_capacity(triples.len());
    for (slot, t) in triples.iter().enumerate() {
        let corr = correlate_from_hats(&grid, fft, &stack.h3_hat[slot], &mu_hat);
        let h0 = stack.h0.get(t[0], t[1], t[2]);
        let mut arr = vec![0.0; nn];
        for y in 0..nn {
            arr[y] = 0.5 * corr[y] + 0.5 * mu[y] * h0;
        }
        out.push(arr);
    }
    Ok(out)
}

/// C̃ by the solvability route.
pub fn compute_ctilde_solvability(op: &NonlocalOperator, a: &CorrectorA) -> Result<Tensor4> {
    let stack = &op.stack;
    let d = stack.dimension;
    let grid = stack.grid;
    let nn = grid.node_count();
    let vol = grid.cell_volume();
    let wq = wq_field(op)?;
    let mfield = m_field(op)?;
    let pairs = sym_pairs(d);

    // Mean of W^Q per quadruple slot.
    let wq_mean: Vec<f64> = wq.iter().map(|arr| vol * arr.iter().sum::<f64>()).collect();

    // term2[(ij pair)][(kl pair)] = h^d Σ_y Σ_p M_{ijp}(y) aᵏˡ_p(y);
    // symmetric in i↔j and k↔l by storage.
    let np = pairs.len();
    let mut term2 = vec![vec![0.0f64; np]; np];
    for (pij, &(i, j)) in pairs.iter().enumerate() {
        for (pkl, _) in pairs.iter().enumerate() {
            let af = &a.fields[pkl];
            let mut s = 0.0;
            for p in 0..d {
                let m = &mfield[stack.h3_slot(i, j, p)];
                let ap = af.component(p);
                let mut acc = 0.0;
                for y in 0..nn {
                    acc += m[y] * ap[y];
                }
                s += acc;
            }
            term2[pij][pkl] = vol * s;
        }
    }

    let mut c = Tensor4::zeros(d);
    for i in 0..d {
        for j in 0..d {
            let pij = crate::tensors::sym_pair_index(d, i, j);
            for k in 0..d {
                for l in 0..d {
                    let pkl = crate::tensors::sym_pair_index(d, k, l);
                    let slot = stack.q4_slot(i, j, k, l);
                    c.set(i, j, k, l, 0.5 * wq_mean[slot] - term2[pij][pkl]);
                }
            }
        }
    }
    Ok(c)
}

/// C̃ by the quadratic route: direct double sum over displacements in the
/// kernel support, using the corrector differences `Δa = a(q) − a(y)`.
pub fn compute_ctilde_quadratic(op: &NonlocalOperator, a: &CorrectorA) -> Result<Tensor4> {
    let stack = &op.stack;
    if stack.max_rank < 4 {
        return Err(PerihomError::InvalidArgument(
            "C̃ requires a kernel stack built to rank 4".into(),
        ));
    }
    let d = stack.dimension;
    let grid = stack.grid;
    let n = grid.n;
    let nn = grid.node_count();
    let vol2 = grid.cell_volume() * grid.cell_volume();
    let mu = op.mu.component(0);
    let pairs = sym_pairs(d);
    let np = pairs.len();

    // Upper-triangle accumulators over pair combinations (pij ≤ pkl).
    let mut acc = vec![0.0f64; np * np];

    // Slices of the corrector components for fast access.
    let a_comp: Vec<Vec<&[f64]>> = a
        .fields
        .iter()
        .map(|f| (0..d).map(|c| f.component(c)).collect())
        .collect();

    let mut wrap: Vec<Vec<usize>> = vec![vec![0; n]; d];
    let mut idx = vec![0usize; d];
    let mut da = vec![[0.0f64; 3]; np];
    for &dz in &stack.support {
        let dzi = grid.multi_index(dz);
        for k in 0..d {
            let w = &mut wrap[k];
            let shift = dzi[k];
            for (y, item) in w.iter_mut().enumerate() {
                *item = if y + shift >= n { y + shift - n } else { y + shift };
            }
        }
        // Kernel values at this displacement.
        let mut kq = [0.0f64; 15]; // Q̄ per quad slot
        for (slot, v) in stack.q4.iter().enumerate() {
            kq[slot] = v[dz];
        }
        let mut kh = [0.0f64; 10]; // H̄ per triple slot
        for (slot, v) in stack.h3.iter().enumerate() {
            kh[slot] = v[dz];
        }
        let mut kk = [0.0f64; 6]; // K̄ per pair slot
        for (slot, v) in stack.k2.iter().enumerate() {
            kk[slot] = v[dz];
        }

        idx.iter_mut().for_each(|v| *v = 0);
        for y in 0..nn {
            // q = y + dz with wrap, from the per-axis tables.
            let mut q = 0usize;
            let mut stride = 1usize;
            for k in 0..d {
                q += wrap[k][idx[k]] * stride;
                stride *= n;
            }
            let ms = 0.5 * (mu[q] + mu[y]);

            for (p, comps) in a_comp.iter().enumerate() {
                for (c, comp) in comps.iter().enumerate() {
                    da[p][c] = comp[q] - comp[y];
                }
            }
            for pij in 0..np {
                let (i, j) = pairs[pij];
                let daij = &da[pij];
                for pkl in pij..np {
                    let (k, l) = pairs[pkl];
                    let dakl = &da[pkl];
                    let mut term = kq[stack.q4_slot(i, j, k, l)];
                    // Σ_p H̄_{klp} Δa^{ij}_p + Σ_p H̄_{ijp} Δaᵏˡ_p
                    for p in 0..d {
                        term += kh[stack.h3_slot(k, l, p)] * daij[p];
                        term += kh[stack.h3_slot(i, j, p)] * dakl[p];
                    }
                    // Δa^{ij}ᵀ K̄ Δaᵏˡ
                    for p in 0..d {
                        for r in 0..d {
                            term += daij[p] * kk[stack.k2_slot(p, r)] * dakl[r];
                        }
                    }
                    acc[pij * np + pkl] += ms * term;
                }
            }

            // Increment the multi-index.
            for k in 0..d {
                idx[k] += 1;
                if idx[k] < n {
                    break;
                }
                idx[k] = 0;
            }
        }
    }

    let mut c = Tensor4::zeros(d);
    for i in 0..d {
        for j in 0..d {
            let pij = crate::tensors::sym_pair_index(d, i, j);
            for k in 0..d {
                for l in 0..d {
                    let pkl = crate::tensors::sym_pair_index(d, k, l);
                    let (lo, hi) = if pij <= pkl { (pij, pkl) } else { (pkl, pij) };
                    c.set(i, j, k, l, 0.5 * vol2 * acc[lo * np + hi]);
                }
            }
        }
    }
    Ok(c)
}

/// Run both C̃ formulas and compare against the two-formula gate.
pub fn ctilde_report(op: &NonlocalOperator, a: &CorrectorA) -> Result<CTildeReport> {
    let solvability = compute_ctilde_solvability(op, a)?;
    let quadratic = compute_ctilde_quadratic(op, a)?;
    let max_abs_diff = solvability.max_abs_diff(&quadratic);
    let scale = solvability.max_abs();
    let rel = if scale > 0.0 {
        max_abs_diff / scale
    } else {
        max_abs_diff
    };
    let gate = crate::tolerances::TWO_FORMULA_GATE;
    Ok(CTildeReport {
        dimension: op.stack.dimension,
        solvability,
        quadratic,
        max_abs_diff,
        rel_diff: rel,
        gate,
        pass: rel <= gate,
    })
}

/// The fields `R_k(w)` for all k = 0..d, each a d-component field.
fn r_fields(op: &NonlocalOperator, w: &PeriodicField) -> Result<Vec<PeriodicField>> {
    let stack = &op.stack;
    let d = stack.dimension;
    let grid = stack.grid;
    let nn = grid.node_count();
    let fft = &stack.fft;
    let mu = op.mu.component(0);

    let mut w_hat: Vec<Vec<C64>> = Vec::with_capacity(d);
    let mut mw_hat: Vec<Vec<C64>> = Vec::with_capacity(d);
    for p in 0..d {
        let wp = w.component(p);
        w_hat.push(fft.forward(wp));
        let mw: Vec<f64> = wp.iter().zip(mu.iter()).map(|(a, b)| a * b).collect();
        mw_hat.push(fft.forward(&mw));
    }

    let volw = grid.cell_volume();
    let mut out = Vec::with_capacity(d);
    for k in 0..d {
        let mut rk = PeriodicField::zeros(grid, d);
        for i in 0..d {
            let mut spec1 = vec![C64::new(0.0, 0.0); nn];
            let mut spec2 = vec![C64::new(0.0, 0.0); nn];
            for p in 0..d {
                let hhat = &stack.h3_hat[stack.h3_slot(i, p, k)];
                for q in 0..nn {
                    spec1[q] += hhat[q] * w_hat[p][q];
                    spec2[q] += hhat[q] * mw_hat[p][q];
                }
            }
            let conv_w = fft.inverse_real(spec1.iter().map(|c| c * volw).collect());
            let conv_mw = fft.inverse_real(spec2.iter().map(|c| c * volw).collect());
            let ri = rk.component_mut(i);
            for q in 0..nn {
                ri[q] = 0.5 * mu[q] * conv_w[q] + 0.5 * conv_mw[q];
            }
        }
        out.push(rk);
    }
    Ok(out)
}

/// Assemble the second cell problem's data gʲᵏˡ for a given C̃ (no solve).
/// Means are recorded pre-solve; they vanish exactly when `ctilde` is the
/// solvability-route tensor of the same correctors.
pub fn assemble_g_fields(
    op: &NonlocalOperator,
    lambda1: &PeriodicField,
    a: &CorrectorA,
    ctilde: &Tensor4,
) -> Result<CellDataG> {
    let stack = &op.stack;
    let d = stack.dimension;
    let grid = stack.grid;
    let nn = grid.node_count();
    if lambda1.grid != grid || lambda1.components != 1 {
        return Err(PerihomError::GridMismatch(
            "λ₁ must be a scalar field on the cell grid".into(),
        ));
    }
    let hm = mean_inv_lambda1(lambda1)?;
    let hm_inv = 1.0 / hm;
    let wq = wq_field(op)?;
    // R_k applied to every corrector field aᵖʳ, indexed [pair][k].
    let mut r_all = Vec::with_capacity(a.fields.len());
    for af in &a.fields {
        r_all.push(r_fields(op, af)?);
    }
    let pair_index = |k: usize, l: usize| crate::tensors::sym_pair_index(d, k, l);
    let l1 = lambda1.component(0);

    let mut triples = Vec::new();
    let mut fields = Vec::new();
    let mut means = Vec::new();
    let mut max_mean = 0.0f64;
    for j in 0..d {
        for (k, l) in sym_pairs(d) {
            let mut g = PeriodicField::zeros(grid, d);
            let r_jl = &r_all[pair_index(j, l)][k];
            let r_jk = &r_all[pair_index(j, k)][l];
            for i in 0..d {
                let gamma = gamma_component(ctilde, j, k, l, i);
                let wq_slot = &wq[stack.q4_slot(i, j, k, l)];
                let rjl_i = r_jl.component(i);
                let rjk_i = r_jk.component(i);
                let gi = g.component_mut(i);
                for q in 0..nn {
                    gi[q] = hm_inv * gamma / l1[q] - 0.5 * wq_slot[q]
                        + 0.5 * (rjl_i[q] + rjk_i[q]);
                }
            }
            let m = g.mean();
            for &v in &m {
                max_mean = max_mean.max(v.abs());
            }
            triples.push((j, k, l));
            means.push(m);
            fields.push(g);
        }
    }
    Ok(CellDataG {
        triples,
        fields,
        means,
        max_abs_mean: max_mean,
    })
}

/// Assemble gʲᵏˡ from the given C̃ and solve the second cell problem.
pub fn assemble_g_and_solve_b(
    op: &NonlocalOperator,
    lambda1: &PeriodicField,
    a: &CorrectorA,
    ctilde: &Tensor4,
    cg: &CgOptions,
) -> Result<(CellDataG, CorrectorB)> {
    let gdata = assemble_g_fields(op, lambda1, a, ctilde)?;
    let mut fields = Vec::with_capacity(gdata.fields.len());
    let mut reports = Vec::with_capacity(gdata.fields.len());
    for (t, rhs) in gdata.fields.iter().enumerate() {
        let (j, k, l) = gdata.triples[t];
        let (x, report) = solve_fredholm(op, rhs, cg, &format!("cell problem B ({j}{k}{l})"))?;
        fields.push(x);
        reports.push(report);
    }
    let b = CorrectorB {
        triples: gdata.triples.clone(),
        fields,
        reports,
    };
    Ok((gdata, b))
}

/// Re-assemble `λ₁(q) Φʲᵏˡ(q)` from a fresh application of the operator to
/// bʲᵏˡ and measure its deviation from the constant `Hm⁻¹ Γʲᵏˡ`.
pub fn check_phi_constant(
    op: &NonlocalOperator,
    lambda1: &PeriodicField,
    a: &CorrectorA,
    b: &CorrectorB,
    ctilde: &Tensor4,
) -> Result<PhiReport> {
    let stack = &op.stack;
    let d = stack.dimension;
    let grid = stack.grid;
    let nn = grid.node_count();
    let hm_inv = 1.0 / mean_inv_lambda1(lambda1)?;
    let wq = wq_field(op)?;
    let mut r_all = Vec::with_capacity(a.fields.len());
    for af in &a.fields {
        r_all.push(r_fields(op, af)?);
    }
    let pair_index = |k: usize, l: usize| crate::tensors::sym_pair_index(d, k, l);
    let l1 = lambda1.component(0);

    let mut per_triple = Vec::with_capacity(b.fields.len());
    let mut max_dev = 0.0f64;
    let mut const_scale = 0.0f64;
    for (t, &(j, k, l)) in b.triples.iter().enumerate() {
        let sb = op.apply_k_minus_g(&b.fields[t])?;
        let r_jl = &r_all[pair_index(j, l)][k];
        let r_jk = &r_all[pair_index(j, k)][l];
        let mut worst = 0.0f64;
        for i in 0..d {
            let gamma_c = hm_inv * gamma_component(ctilde, j, k, l, i);
            const_scale = const_scale.max(gamma_c.abs());
            let wq_slot = &wq[stack.q4_slot(i, j, k, l)];
            let sbi = sb.component(i);
            let rjl_i = r_jl.component(i);
            let rjk_i = r_jk.component(i);
            for q in 0..nn {
                let phi = sbi[q] + 0.5 * wq_slot[q] - 0.5 * (rjl_i[q] + rjk_i[q]);
                worst = worst.max((l1[q] * phi - gamma_c).abs());
            }
        }
        per_triple.push(worst);
        max_dev = max_dev.max(worst);
    }
    Ok(PhiReport {
        per_triple_max: per_triple,
        max_deviation: max_dev,
        constant_scale: const_scale,
    })
}
