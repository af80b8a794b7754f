//! The discrete nonlocal operators.
//!
//! On a torus with kernel stack K̄ and state weight μ the two constituents
//! are the convolution part and the multiplier part,
//!
//! - `(𝕂 v)(q) = ½ (K̄ ∗ (μ v))(q) + ½ μ(q) (K̄ ∗ v)(q)`,
//! - `(𝔾 v)(q) = 𝐆(q) v(q)` with `𝐆(q) = ½ μ(q) K̄₀ + ½ (K̄ ∗ μ)(q)`,
//!
//! so that `((𝕂 − 𝔾) v)(q) = h^d Σ_y μ_s(q,y) K̄(q−y) [v(y) − v(q)]` with
//! `μ_s(q,y) = ½(μ(q) + μ(y))`. The operator annihilates constants, is
//! self-adjoint, and is negative semidefinite; those properties are
//! structural (they follow from the evenness of K̄ and the symmetry of μ_s)
//! and hold in floating point up to roundoff.
//!
//! The heterogeneous macroscopic operator on a box-torus of side L is
//! `(Lᵉ v)(x) = ε^{−2} λ(x, x/ε) ((𝕂_ε − 𝔾_ε) v)(x)` built from the
//! ε-rescaled kernel; its resolvent `(m − Lᵉ)^{-1}` is computed by CG in the
//! inner product weighted by `ν = 1/λ`, in which the operator is symmetric.

use serde::{Deserialize, Serialize};

use crate::cg::{cg_solve, CgOptions, CgReport};
use crate::error::{PerihomError, Result};
use crate::kernels::{KernelBuildOptions, KernelStack, C64};
use crate::model::{CoefficientModel, KernelSpec};
use crate::torus::{sample_coefficient, tile_to_box, PeriodicField, TorusGrid};

/// The multiplier matrix field 𝐆(q) = ½ μ(q) K̄₀ + ½ (K̄ ∗ μ)(q), stored by
/// symmetric pairs.
pub struct GMultiplier {
    pub grid: TorusGrid,
    pub dimension: usize,
    slots: Vec<Vec<f64>>,
}

impl GMultiplier {
    /// Entry 𝐆_{ij}(q) at flat node `q`.
    pub fn at(&self, flat: usize, i: usize, j: usize) -> f64 {
        self.slots[crate::tensors::sym_pair_index(self.dimension, i, j)][flat]
    }

    /// Largest absolute entry over all nodes.
    pub fn max_abs(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Smallest eigenvalue of 𝐆(q) over all nodes (Rayleigh floor).
    pub fn min_eigenvalue(&self) -> f64 {
        let d = self.dimension;
        let mut min = f64::INFINITY;
        for flat in 0..self.grid.node_count() {
            let mut m = crate::tensors::Tensor2::zeros(d);
            for i in 0..d {
                for j in 0..d {
                    m.set(i, j, self.at(flat, i, j));
                }
            }
            min = min.min(m.symmetric_eigenvalues()[0]);
        }
        min
    }
}

/// Assemble the multiplier 𝐆 for a kernel stack and weight μ. The
/// convolution runs through the same FFT path as the operator itself.
pub fn assemble_g(stack: &KernelStack, mu: &PeriodicField) -> Result<GMultiplier> {
    if mu.grid != stack.grid || mu.components != 1 {
        return Err(PerihomError::GridMismatch(
            "μ must be a scalar field on the stack's grid".into(),
        ));
    }
    let d = stack.dimension;
    let grid = stack.grid;
    let nn = grid.node_count();
    let mu_hat = stack.fft.forward(mu.component(0));
    let pairs = crate::tensors::sym_pairs(d);
    let mut slots = Vec::with_capacity(pairs.len());
    let w = grid.cell_volume();
    for (slot, &(i, j)) in pairs.iter().enumerate() {
        let prod: Vec<C64> = stack.k2_hat[slot]
            .iter()
            .zip(mu_hat.iter())
            .map(|(k, m)| k * m * w)
            .collect();
        let conv = stack.fft.inverse_real(prod);
        let k0ij = stack.k0_matrix.get(i, j);
        let mut arr = vec![0.0; nn];
        for q in 0..nn {
            arr[q] = 0.5 * mu.get(0, q) * k0ij + 0.5 * conv[q];
        }
        slots.push(arr);
    }
    Ok(GMultiplier {
        grid,
        dimension: d,
        slots,
    })
}

/// The pair (𝕂, 𝔾) for one kernel stack and weight field, with the FFT
/// plans and multiplier precomputed.
pub struct NonlocalOperator {
    pub stack: KernelStack,
    pub mu: PeriodicField,
    pub g: GMultiplier,
}

impl NonlocalOperator {
    pub fn new(stack: KernelStack, mu: PeriodicField) -> Result<Self> {
        let g = assemble_g(&stack, &mu)?;
        Ok(NonlocalOperator { stack, mu, g })
    }

    pub fn grid(&self) -> TorusGrid {
        self.stack.grid
    }

    fn check_field(&self, v: &PeriodicField) -> Result<()> {
        if v.grid != self.stack.grid || v.components != self.stack.dimension {
            return Err(PerihomError::GridMismatch(
                "field must have d components on the operator grid".into(),
            ));
        }
        Ok(())
    }

    /// Convolution part: `(𝕂 v)_i = ½ Σ_j K̄_{ij} ∗ (μ v_j) + ½ μ Σ_j K̄_{ij} ∗ v_j`.
    pub fn apply_k(&self, v: &PeriodicField) -> Result<PeriodicField> {
        self.check_field(v)?;
        let d = self.stack.dimension;
        let grid = self.stack.grid;
        let nn = grid.node_count();
        let w = grid.cell_volume();
        let fft = &self.stack.fft;
        let mu = self.mu.component(0);

        let mut vhat = Vec::with_capacity(d);
        let mut mvhat = Vec::with_capacity(d);
        for j in 0..d {
            let vj = v.component(j);
            vhat.push(fft.forward(vj));
            let muv: Vec<f64> = vj.iter().zip(mu.iter()).map(|(a, b)| a * b).collect();
            mvhat.push(fft.forward(&muv));
        }

        let mut out = PeriodicField::zeros(grid, d);
        let mut spec1 = vec![C64::new(0.0, 0.0); nn];
        let mut spec2 = vec![C64::new(0.0, 0.0); nn];
        for i in 0..d {
            for s in spec1.iter_mut() {
                *s = C64::new(0.0, 0.0);
            }
            for s in spec2.iter_mut() {
                *s = C64::new(0.0, 0.0);
            }
            for j in 0..d {
                let khat = &self.stack.k2_hat[self.stack.k2_slot(i, j)];
                for q in 0..nn {
                    spec1[q] += khat[q] * mvhat[j][q];
                    spec2[q] += khat[q] * vhat[j][q];
                }
            }
            let conv_mv = fft.inverse_real(spec1.iter().map(|c| c * w).collect());
            let conv_v = fft.inverse_real(spec2.iter().map(|c| c * w).collect());
            let oi = out.component_mut(i);
            for q in 0..nn {
                oi[q] = 0.5 * conv_mv[q] + 0.5 * mu[q] * conv_v[q];
            }
        }
        Ok(out)
    }

    /// Multiplier part: `(𝔾 v)_i(q) = Σ_j 𝐆_{ij}(q) v_j(q)`.
    pub fn apply_g_mult(&self, v: &PeriodicField) -> Result<PeriodicField> {
        self.check_field(v)?;
        let d = self.stack.dimension;
        let grid = self.stack.grid;
        let nn = grid.node_count();
        let mut out = PeriodicField::zeros(grid, d);
        for i in 0..d {
            let oi = out.component_mut(i);
            for j in 0..d {
                let vj = v.component(j);
                for q in 0..nn {
                    oi[q] += self.g.at(q, i, j) * vj[q];
                }
            }
        }
        Ok(out)
    }

    /// `(𝕂 − 𝔾) v`.
    pub fn apply_k_minus_g(&self, v: &PeriodicField) -> Result<PeriodicField> {
        let mut out = self.apply_k(v)?;
        let gv = self.apply_g_mult(v)?;
        out.axpy(-1.0, &gv);
        Ok(out)
    }

    /// Direct O(N^{2d}) evaluation of `(𝕂 − 𝔾) v` from the difference form
    /// (reference implementation for small grids).
    pub fn apply_k_minus_g_direct(&self, v: &PeriodicField) -> Result<PeriodicField> {
        self.check_field(v)?;
        let d = self.stack.dimension;
        let grid = self.stack.grid;
        let nn = grid.node_count();
        let w = grid.cell_volume();
        let n = grid.n as isize;
        let mu = self.mu.component(0);
        let mut out = PeriodicField::zeros(grid, d);
        for q in 0..nn {
            let qi = grid.multi_index(q);
            let mut acc = [0.0f64; 3];
            for y in 0..nn {
                let yi = grid.multi_index(y);
                let mut zi = vec![0usize; d];
                for k in 0..d {
                    zi[k] = (qi[k] as isize - yi[k] as isize).rem_euclid(n) as usize;
                }
                let z = grid.flat_index(&zi);
                if self.stack.rho0[z] == 0.0 {
                    continue;
                }
                let ms = 0.5 * (mu[q] + mu[y]);
                for i in 0..d {
                    let mut s = 0.0;
                    for j in 0..d {
                        s += self.stack.k2_at(z, i, j) * (v.get(j, y) - v.get(j, q));
                    }
                    acc[i] += ms * s;
                }
            }
            for i in 0..d {
                out.set(i, q, w * acc[i]);
            }
        }
        Ok(out)
    }

    /// Direct evaluation of the Dirichlet (energy) form
    /// `−½ h^{2d} Σ_{q,y} μ_s(q,y) (v(q)−v(y))ᵀ K̄(q−y) (w(q)−w(y))`,
    /// which equals `⟨(𝕂−𝔾)v, w⟩` exactly. O(N^{2d}); test oracle.
    pub fn dirichlet_form_direct(&self, v: &PeriodicField, w: &PeriodicField) -> Result<f64> {
        self.check_field(v)?;
        self.check_field(w)?;
        let d = self.stack.dimension;
        let grid = self.stack.grid;
        let nn = grid.node_count();
        let vol2 = grid.cell_volume() * grid.cell_volume();
        let n = grid.n as isize;
        let mu = self.mu.component(0);
        let mut total = 0.0;
        for q in 0..nn {
            let qi = grid.multi_index(q);
            for y in 0..nn {
                let yi = grid.multi_index(y);
                let mut zi = vec![0usize; d];
                for k in 0..d {
                    zi[k] = (qi[k] as isize - yi[k] as isize).rem_euclid(n) as usize;
                }
                let z = grid.flat_index(&zi);
                if self.stack.rho0[z] == 0.0 {
                    continue;
                }
                let ms = 0.5 * (mu[q] + mu[y]);
                let mut form = 0.0;
                for i in 0..d {
                    let dvi = v.get(i, q) - v.get(i, y);
                    for j in 0..d {
                        let dwj = w.get(j, q) - w.get(j, y);
                        form += dvi * self.stack.k2_at(z, i, j) * dwj;
                    }
                }
                total += ms * form;
            }
        }
        Ok(-0.5 * vol2 * total)
    }

    /// Dense matrix of `−(𝕂−𝔾)` in the component-major node basis, by
    /// applying the operator to every basis field. Returns the matrix and
    /// its maximum asymmetry (the matrix itself is *not* symmetrized).
    pub fn dense_negative_matrix(&self) -> Result<(nalgebra::DMatrix<f64>, f64)> {
        let d = self.stack.dimension;
        let nn = self.stack.grid.node_count();
        let size = d * nn;
        let mut m = nalgebra::DMatrix::<f64>::zeros(size, size);
        for col in 0..size {
            let mut e = PeriodicField::zeros(self.stack.grid, d);
            e.as_mut_slice()[col] = 1.0;
            let mut se = self.apply_k_minus_g(&e)?;
            se.scale(-1.0);
            for (row, &val) in se.as_slice().iter().enumerate() {
                m[(row, col)] = val;
            }
        }
        let mut asym = 0.0f64;
        for r in 0..size {
            for c in (r + 1)..size {
                asym = asym.max((m[(r, c)] - m[(c, r)]).abs());
            }
        }
        Ok((m, asym))
    }
}

/// Record of the computational domain substituted for full space.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct DomainRecord {
    pub kind: String,
    pub box_length: f64,
    pub grid: usize,
}

impl DomainRecord {
    pub fn periodic_box(box_length: f64, grid: usize) -> Self {
        DomainRecord {
            kind: "periodic_box".into(),
            box_length,
            grid,
        }
    }
}

/// Report of one resolvent solve `(m − Lᵉ) u = f`.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ResolventReport {
    pub m: f64,
    pub eps: f64,
    pub iterations: usize,
    pub residual: f64,
    pub rhs_norm: f64,
    pub solution_norm: f64,
    /// `m · ‖u‖ / ‖f‖`; bounded by `uniform_bound` for admissible data.
    pub norm_ratio: f64,
    /// `√(α₂/α₁)`.
    pub uniform_bound: f64,
    pub domain: DomainRecord,
}

/// The heterogeneous operator `Lᵉ` on a macroscopic box-torus, with its
/// coefficient fields sampled compatibly with the unit cell: the box grid
/// has `n_eps · cell_n` nodes per axis (`n_eps = L/ε` integral), so fast
/// variables are tiled from the cell grid without interpolation.
pub struct BoxOperator {
    pub nonlocal: NonlocalOperator,
    /// λ(x, x/ε) on box nodes.
    pub lambda: PeriodicField,
    /// ν = 1/λ(x, x/ε) on box nodes (CG inner-product weight).
    pub nu: PeriodicField,
    pub eps: f64,
    pub n_eps: usize,
    pub cell_grid: TorusGrid,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl BoxOperator {
    /// Build `Lᵉ` for the given kernel/coefficients. `cell_n` is the number
    /// of nodes per axis across one periodicity cell (also the cell-problem
    /// grid), so the box grid is `(L/ε)·cell_n` per axis.
    pub fn build(
        spec: &KernelSpec,
        model: &CoefficientModel,
        cell_n: usize,
        eps: f64,
        box_length: f64,
        opts: &KernelBuildOptions,
    ) -> Result<Self> {
        if spec.dimension != model.dimension {
            return Err(PerihomError::GridMismatch(
                "kernel and coefficient dimensions differ".into(),
            ));
        }
        if eps <= 0.0 || box_length <= 0.0 {
            return Err(PerihomError::InvalidArgument(
                "eps and box length must be positive".into(),
            ));
        }
        let ratio = box_length / eps;
        let n_eps = ratio.round();
        if (ratio - n_eps).abs() > 1e-9 || n_eps < 1.0 {
            return Err(PerihomError::InvalidArgument(format!(
                "L/ε = {ratio} must be a positive integer so cell nodes map exactly onto box nodes"
            )));
        }
        let n_eps = n_eps as usize;
        if cell_n < crate::tolerances::MIN_NODES_PER_EPS_CELL {
            return Err(PerihomError::InvalidArgument(format!(
                "need at least {} nodes per ε-cell, got {cell_n}",
                crate::tolerances::MIN_NODES_PER_EPS_CELL
            )));
        }
        let d = spec.dimension;
        let cell_grid = TorusGrid::unit_cell(d, cell_n)?;
        let box_grid = TorusGrid::new(d, n_eps * cell_n, box_length)?;

        let mu_cell = sample_coefficient(cell_grid, &model.mu)?;
        let mu_box = tile_to_box(&mu_cell, n_eps, box_length)?;
        let lambda1_cell = sample_coefficient(cell_grid, &model.lambda1)?;
        let lambda1_box = tile_to_box(&lambda1_cell, n_eps, box_length)?;
        let lambda0_box = sample_coefficient(box_grid, &model.lambda0)?;
        let mut lambda = PeriodicField::zeros(box_grid, 1);
        let mut nu = PeriodicField::zeros(box_grid, 1);
        for q in 0..box_grid.node_count() {
            let l = lambda0_box.get(0, q) * lambda1_box.get(0, q);
            if l <= 0.0 {
                return Err(PerihomError::Validation(
                    "λ must be strictly positive on the box".into(),
                ));
            }
            lambda.set(0, q, l);
            nu.set(0, q, 1.0 / l);
        }

        let mut box_opts = *opts;
        box_opts.max_rank = 2;
        let stack = KernelStack::build_rescaled(spec, box_grid, eps, &box_opts)?;
        let nonlocal = NonlocalOperator::new(stack, mu_box)?;
        Ok(BoxOperator {
            nonlocal,
            lambda,
            nu,
            eps,
            n_eps,
            cell_grid,
            alpha1: model.alpha1,
            alpha2: model.alpha2,
        })
    }

    pub fn grid(&self) -> TorusGrid {
        self.nonlocal.stack.grid
    }

    /// `(Lᵉ v)(x) = ε^{−2} λ(x, x/ε) ((𝕂_ε − 𝔾_ε) v)(x)`.
    pub fn apply_leps(&self, v: &PeriodicField) -> Result<PeriodicField> {
        let mut out = self.nonlocal.apply_k_minus_g(v)?;
        let scale = 1.0 / (self.eps * self.eps);
        let nn = self.grid().node_count();
        let lam = self.lambda.component(0);
        for c in 0..out.components {
            let oc = out.component_mut(c);
            for q in 0..nn {
                oc[q] *= scale * lam[q];
            }
        }
        Ok(out)
    }

    /// Solve `(m I − Lᵉ) u = f` by CG in the ν-weighted inner product, in
    /// which the operator is symmetric positive definite. The convergence
    /// test uses the plain residual norm against `tol · ‖f‖`.
    pub fn resolvent_solve(
        &self,
        m: f64,
        f: &PeriodicField,
        cg: &CgOptions,
    ) -> Result<(PeriodicField, ResolventReport, CgReport)> {
        if m <= 0.0 {
            return Err(PerihomError::InvalidArgument(
                "resolvent shift m must be positive".into(),
            ));
        }
        let apply = |v: &PeriodicField| -> PeriodicField {
            let mut out = self
                .apply_leps(v)
                .expect("operator application on matching grids");
            out.scale(-1.0);
            out.axpy(m, v);
            out
        };
        let (u, report) = cg_solve(&apply, f, None, Some(&self.nu), None, cg)?;
        if !report.converged {
            return Err(PerihomError::Convergence(format!(
                "resolvent CG did not reach tolerance in {} iterations (residual {:.3e})",
                report.iterations, report.residual
            )));
        }
        let fnorm = f.norm_l2();
        let unorm = u.norm_l2();
        let resolvent = ResolventReport {
            m,
            eps: self.eps,
            iterations: report.iterations,
            residual: report.residual,
            rhs_norm: fnorm,
            solution_norm: unorm,
            norm_ratio: if fnorm > 0.0 { m * unorm / fnorm } else { 0.0 },
            uniform_bound: (self.alpha2 / self.alpha1).sqrt(),
            domain: DomainRecord::periodic_box(self.grid().box_length, self.grid().n),
        };
        Ok((u, resolvent, report))
    }
}
