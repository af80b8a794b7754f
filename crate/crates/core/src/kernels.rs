//! Periodized kernel stacks and FFT-based periodic convolution.
//!
//! All nonlocal operators in the toolkit reduce to periodic convolutions
//! against lattice-periodized moment kernels of the interaction density ρ.
//! For a displacement node `z` on the torus the stack stores, summed over
//! all lattice images `z + m·L` and averaged over a supersampling cloud
//! inside the grid cell:
//!
//! - rank 0: `ρ̄(z) = Σ_m ρ(z+m)` and the second-moment weight
//!   `Σ_m ρ(z+m)|z+m|²`,
//! - rank 1: `(ρ̄z)_i = Σ_m ρ(z+m)(z+m)_i` (odd; used by structure tests),
//! - rank 2: `K̄_{ij} = Σ_m ρ(z+m)(z+m)_i(z+m)_j/|z+m|²`,
//! - rank 3: `H̄_{ikl} = Σ_m ρ(z+m)(z+m)_i(z+m)_k(z+m)_l/|z+m|²`,
//! - rank 4: `Q̄_{ijkl} = Σ_m ρ(z+m)·Π(z+m)/|z+m|²` (all four factors).
//!
//! Ranks 2–4 are fully symmetric and stored by sorted multi-index. After
//! the build, even ranks are symmetrized and odd ranks antisymmetrized
//! across `z ↦ −z` so that parity holds *exactly* in floating point; the
//! discrete operator identities (annihilation of constants, self-adjointness,
//! zero means of the cell-problem data) inherit that exactness.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{PerihomError, Result};
use crate::model::KernelSpec;
use crate::tensors::{sym_pair_index, sym_pairs, Tensor2, Tensor3, Tensor4};
use crate::torus::TorusGrid;

/// Complex double, the FFT scalar type.
pub type C64 = Complex<f64>;

/// Multi-dimensional FFT on the crate's flat node layout (axis 0 fastest),
/// built on 1-D transforms applied axis by axis.
pub struct NdFft {
    dimension: usize,
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl NdFft {
    pub fn new(dimension: usize, n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        NdFft {
            dimension,
            n,
            fwd,
            inv,
        }
    }

    pub fn node_count(&self) -> usize {
        self.n.pow(self.dimension as u32)
    }

    fn transform(&self, data: &mut [C64], fft: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        let total = self.node_count();
        debug_assert_eq!(data.len(), total);
        let mut line = vec![C64::new(0.0, 0.0); n];
        let mut stride = 1usize;
        for _axis in 0..self.dimension {
            let block = stride * n;
            let nblocks = total / block;
            for b in 0..nblocks {
                let base_block = b * block;
                for inner in 0..stride {
                    let base = base_block + inner;
                    for (t, item) in line.iter_mut().enumerate() {
                        *item = data[base + t * stride];
                    }
                    fft.process(&mut line);
                    for (t, item) in line.iter().enumerate() {
                        data[base + t * stride] = *item;
                    }
                }
            }
            stride *= n;
        }
    }

    /// Unnormalized forward transform of a real array.
    pub fn forward(&self, real: &[f64]) -> Vec<C64> {
        let mut data: Vec<C64> = real.iter().map(|&x| C64::new(x, 0.0)).collect();
        self.transform(&mut data, &self.fwd);
        data
    }

    /// Unnormalized forward transform in place.
    pub fn forward_complex(&self, data: &mut [C64]) {
        self.transform(data, &self.fwd);
    }

    /// Normalized inverse transform; returns the real parts.
    pub fn inverse_real(&self, mut data: Vec<C64>) -> Vec<f64> {
        self.transform(&mut data, &self.inv);
        let scale = 1.0 / self.node_count() as f64;
        data.iter().map(|c| c.re * scale).collect()
    }
}

/// Periodic convolution with quadrature weight:
/// `out(q) = h^d Σ_y kernel(q − y) v(y)` (indices wrap on the torus).
/// Computed by FFT in O(N^d log N).
pub fn periodic_convolve(grid: &TorusGrid, kernel: &[f64], v: &[f64]) -> Vec<f64> {
    let fft = NdFft::new(grid.dimension, grid.n);
    let khat = fft.forward(kernel);
    let vhat = fft.forward(v);
    convolve_from_hats(grid, &fft, &khat, &vhat)
}

/// Periodic correlation with quadrature weight:
/// `out(y) = h^d Σ_q kernel(q − y) v(q)`. For a real kernel its transform is
/// the conjugate of the convolution multiplier.
pub fn periodic_correlate(grid: &TorusGrid, kernel: &[f64], v: &[f64]) -> Vec<f64> {
    let fft = NdFft::new(grid.dimension, grid.n);
    let khat = fft.forward(kernel);
    let vhat = fft.forward(v);
    correlate_from_hats(grid, &fft, &khat, &vhat)
}

/// Convolution from precomputed spectra (see [`periodic_convolve`]).
pub fn convolve_from_hats(grid: &TorusGrid, fft: &NdFft, khat: &[C64], vhat: &[C64]) -> Vec<f64> {
    let w = grid.cell_volume();
    let prod: Vec<C64> = khat
        .iter()
        .zip(vhat.iter())
        .map(|(k, v)| k * v * w)
        .collect();
    fft.inverse_real(prod)
}

/// Correlation from precomputed spectra (see [`periodic_correlate`]).
pub fn correlate_from_hats(grid: &TorusGrid, fft: &NdFft, khat: &[C64], vhat: &[C64]) -> Vec<f64> {
    let w = grid.cell_volume();
    let prod: Vec<C64> = khat
        .iter()
        .zip(vhat.iter())
        .map(|(k, v)| k.conj() * v * w)
        .collect();
    fft.inverse_real(prod)
}

/// Direct O(N^{2d}) reference convolution for small grids (test oracle).
pub fn periodic_convolve_direct(grid: &TorusGrid, kernel: &[f64], v: &[f64]) -> Vec<f64> {
    let nn = grid.node_count();
    let w = grid.cell_volume();
    let mut out = vec![0.0; nn];
    let n = grid.n as isize;
    for q in 0..nn {
        let qi = grid.multi_index(q);
        let mut s = 0.0;
        for y in 0..nn {
            let yi = grid.multi_index(y);
            let mut zi = vec![0usize; grid.dimension];
            for k in 0..grid.dimension {
                zi[k] = (qi[k] as isize - yi[k] as isize).rem_euclid(n) as usize;
            }
            s += kernel[grid.flat_index(&zi)] * v[y];
        }
        out[q] = w * s;
    }
    out
}

/// Direct O(N^{2d}) reference correlation for small grids (test oracle).
pub fn periodic_correlate_direct(grid: &TorusGrid, kernel: &[f64], v: &[f64]) -> Vec<f64> {
    let nn = grid.node_count();
    let w = grid.cell_volume();
    let mut out = vec![0.0; nn];
    let n = grid.n as isize;
    for y in 0..nn {
        let yi = grid.multi_index(y);
        let mut s = 0.0;
        for q in 0..nn {
            let qi = grid.multi_index(q);
            let mut zi = vec![0usize; grid.dimension];
            for k in 0..grid.dimension {
                zi[k] = (qi[k] as isize - yi[k] as isize).rem_euclid(n) as usize;
            }
            s += kernel[grid.flat_index(&zi)] * v[q];
        }
        out[y] = w * s;
    }
    out
}

/// Sorted multi-indices of length `r` over `{0,…,d−1}` (non-decreasing).
fn multisets(d: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..r {
        let mut next = Vec::new();
        for m in &out {
            let lo = m.last().copied().unwrap_or(0);
            for i in lo..d {
                let mut e = m.clone();
                e.push(i);
                next.push(e);
            }
        }
        out = next;
    }
    out
}

/// Options for building a [`KernelStack`].
#[derive(Clone, Copy, Debug)]
pub struct KernelBuildOptions {
    /// Supersampling points per axis inside each grid cell (midpoint cloud).
    pub supersample: usize,
    /// Highest moment rank to build: 2 for resolvent work on the box,
    /// 4 for the cell problems.
    pub max_rank: usize,
}

impl Default for KernelBuildOptions {
    fn default() -> Self {
        KernelBuildOptions {
            supersample: crate::tolerances::KERNEL_SUPERSAMPLE,
            max_rank: 4,
        }
    }
}

/// Periodized moment kernels of an interaction density on one torus grid,
/// together with their zeroth moments and Fourier multipliers.
pub struct KernelStack {
    pub grid: TorusGrid,
    pub dimension: usize,
    pub supersample: usize,
    pub max_rank: usize,
    /// Lattice image shells summed per axis (images in `[−S, S]^d`).
    pub shells: usize,

    /// ρ̄ nodal values.
    pub rho0: Vec<f64>,
    /// Σ_m ρ(z+m)|z+m|² nodal values.
    pub rho_z2: Vec<f64>,
    /// (ρ̄z)_i nodal values, `d` slots (odd rank; built when `max_rank ≥ 1`).
    pub rho1: Vec<Vec<f64>>,
    /// K̄ slots in [`sym_pairs`] order.
    pub k2: Vec<Vec<f64>>,
    /// H̄ slots in sorted-triple order (empty unless `max_rank ≥ 3`).
    pub h3: Vec<Vec<f64>>,
    /// Q̄ slots in sorted-quadruple order (empty unless `max_rank ≥ 4`).
    pub q4: Vec<Vec<f64>>,

    /// K̄₀ = h^d Σ_z K̄(z).
    pub k0_matrix: Tensor2,
    /// H̄₀ = h^d Σ_z H̄(z) (exactly zero after antisymmetrization).
    pub h0: Tensor3,
    /// Q̄₀ = h^d Σ_z Q̄(z).
    pub q0: Tensor4,
    /// h^d Σ ρ̄ ≈ a₁.
    pub a1_bar: f64,
    /// h^d Σ Σ_m ρ|z+m|² ≈ a₂ (in the physical coordinates of this grid).
    pub a2_bar: f64,

    /// Unnormalized spectra of the K̄ slots.
    pub k2_hat: Vec<Vec<C64>>,
    /// Unnormalized spectra of the H̄ slots.
    pub h3_hat: Vec<Vec<C64>>,
    /// Unnormalized spectra of the Q̄ slots.
    pub q4_hat: Vec<Vec<C64>>,

    /// Flat displacement indices where ρ̄ > 0 (support of every kernel).
    pub support: Vec<usize>,

    pub fft: NdFft,
    pairs: Vec<(usize, usize)>,
    triples: Vec<Vec<usize>>,
    quads: Vec<Vec<usize>>,
    map3: Vec<usize>,
    map4: Vec<usize>,
}

impl KernelStack {
    /// Build the stack for the density ρ itself (unit periodicity cell or any
    /// torus whose physical coordinates are those of ρ).
    pub fn build(spec: &KernelSpec, grid: TorusGrid, opts: &KernelBuildOptions) -> Result<Self> {
        if spec.dimension != grid.dimension {
            return Err(PerihomError::GridMismatch(
                "kernel and grid dimension differ".into(),
            ));
        }
        Self::build_inner(spec, grid, 1.0, opts)
    }

    /// Build the stack for the rescaled density `ρ_ε(z) = ε^{−d} ρ(z/ε)` on a
    /// macroscopic box-torus; used by the heterogeneous operator.
    pub fn build_rescaled(
        spec: &KernelSpec,
        grid: TorusGrid,
        eps: f64,
        opts: &KernelBuildOptions,
    ) -> Result<Self> {
        if spec.dimension != grid.dimension {
            return Err(PerihomError::GridMismatch(
                "kernel and grid dimension differ".into(),
            ));
        }
        if eps <= 0.0 {
            return Err(PerihomError::InvalidArgument(
                "eps must be positive".into(),
            ));
        }
        Self::build_inner(spec, grid, eps, opts)
    }

    fn build_inner(
        spec: &KernelSpec,
        grid: TorusGrid,
        eps: f64,
        opts: &KernelBuildOptions,
    ) -> Result<Self> {
        let d = grid.dimension;
        let n = grid.n;
        let nn = grid.node_count();
        let h = grid.h();
        let s = opts.supersample.max(1);
        let max_rank = opts.max_rank;
        if !(2..=4).contains(&max_rank) {
            return Err(PerihomError::InvalidArgument(
                "kernel build max_rank must be 2, 3, or 4".into(),
            ));
        }
        let trunc = eps * spec.truncation_radius();
        let lbox = grid.box_length;
        if trunc >= lbox {
            return Err(PerihomError::InvalidArgument(format!(
                "kernel support radius {trunc} must be smaller than the torus length {lbox}"
            )));
        }
        // Images m with |m·L| < trunc + L can reach the support from some
        // point of the torus; everything farther contributes exactly zero.
        let shells = ((trunc / lbox + 1.0) - 1e-9).floor() as usize;
        let shells = shells.max(1);

        let pairs = sym_pairs(d);
        let triples = multisets(d, 3);
        let quads = multisets(d, 4);
        let mut map3 = vec![0usize; d * d * d];
        for (slot, t) in triples.iter().enumerate() {
            // Fill every permutation of the sorted triple.
            let mut perm = t.clone();
            perm.sort_unstable();
            for a in 0..d {
                for b in 0..d {
                    for c in 0..d {
                        let mut key = [a, b, c];
                        key.sort_unstable();
                        if key[..] == perm[..] {
                            map3[(a * d + b) * d + c] = slot;
                        }
                    }
                }
            }
        }
        let mut map4 = vec![0usize; d * d * d * d];
        for (slot, t) in quads.iter().enumerate() {
            let mut perm = t.clone();
            perm.sort_unstable();
            for a in 0..d {
                for b in 0..d {
                    for c in 0..d {
                        for e in 0..d {
                            let mut key = [a, b, c, e];
                            key.sort_unstable();
                            if key[..] == perm[..] {
                                map4[((a * d + b) * d + c) * d + e] = slot;
                            }
                        }
                    }
                }
            }
        }

        let n2 = pairs.len();
        let n3 = triples.len();
        let n4 = quads.len();
        let mut rho0 = vec![0.0f64; nn];
        let mut rho_z2 = vec![0.0f64; nn];
        let mut rho1: Vec<Vec<f64>> = (0..d).map(|_| vec![0.0; nn]).collect();
        let mut k2: Vec<Vec<f64>> = (0..n2).map(|_| vec![0.0; nn]).collect();
        let mut h3: Vec<Vec<f64>> = if max_rank >= 3 {
            (0..n3).map(|_| vec![0.0; nn]).collect()
        } else {
            Vec::new()
        };
        let mut q4: Vec<Vec<f64>> = if max_rank >= 4 {
            (0..n4).map(|_| vec![0.0; nn]).collect()
        } else {
            Vec::new()
        };

        // Supersampling offsets per axis: midpoints of an s-fold refinement,
        // symmetric about zero.
        let offsets: Vec<f64> = (0..s)
            .map(|p| ((p as f64 + 0.5) / s as f64 - 0.5) * h)
            .collect();
        let inv_cloud = 1.0 / (s.pow(d as u32) as f64);
        // Image shifts m·L for all m ∈ [−S, S]^d, flattened.
        let nimg = 2 * shells + 1;
        let image_count = nimg.pow(d as u32);
        let mut images: Vec<[f64; 3]> = Vec::with_capacity(image_count);
        for flat in 0..image_count {
            let mut rem = flat;
            let mut m = [0.0f64; 3];
            for mk in m.iter_mut().take(d) {
                let i = rem % nimg;
                rem /= nimg;
                *mk = (i as isize - shells as isize) as f64 * lbox;
            }
            images.push(m);
        }
        let cloud_count = s.pow(d as u32);
        let inv_eps = 1.0 / eps;
        let prefactor = inv_eps.powi(d as i32);

        let mut w = [0.0f64; 3];
        let mut wscaled = [0.0f64; 3];
        let mut zbase = [0.0f64; 3];
        let mut offs = [0.0f64; 3];
        for flat in 0..nn {
            let mut rem = flat;
            for zc in zbase.iter_mut().take(d) {
                let i = rem % n;
                rem /= n;
                *zc = i as f64 * h;
            }
            let mut acc0 = 0.0f64;
            let mut accz2 = 0.0f64;
            let mut acc1 = [0.0f64; 3];
            let mut acc2 = [0.0f64; 6];
            let mut acc3 = [0.0f64; 10];
            let mut acc4 = [0.0f64; 15];
            for cflat in 0..cloud_count {
                let mut rem = cflat;
                for oc in offs.iter_mut().take(d) {
                    let p = rem % s;
                    rem /= s;
                    *oc = offsets[p];
                }
                for m in &images {
                    let mut r2 = 0.0;
                    for k in 0..d {
                        let wk = zbase[k] + offs[k] + m[k];
                        w[k] = wk;
                        wscaled[k] = wk * inv_eps;
                        r2 += wk * wk;
                    }
                    if r2 > (trunc + h) * (trunc + h) {
                        continue;
                    }
                    let rho = prefactor * spec.evaluate(&wscaled[..d]);
                    if rho == 0.0 {
                        continue;
                    }
                    let wt = rho * inv_cloud;
                    acc0 += wt;
                    accz2 += wt * r2;
                    for k in 0..d {
                        acc1[k] += wt * w[k];
                    }
                    if r2 == 0.0 {
                        continue;
                    }
                    let wr = wt / r2;
                    for (slot, &(a, b)) in pairs.iter().enumerate() {
                        acc2[slot] += wr * w[a] * w[b];
                    }
                    if max_rank >= 3 {
                        for (slot, t) in triples.iter().enumerate() {
                            acc3[slot] += wr * w[t[0]] * w[t[1]] * w[t[2]];
                        }
                    }
                    if max_rank >= 4 {
                        for (slot, t) in quads.iter().enumerate() {
                            acc4[slot] += wr * w[t[0]] * w[t[1]] * w[t[2]] * w[t[3]];
                        }
                    }
                }
            }
            rho0[flat] = acc0;
            rho_z2[flat] = accz2;
            for k in 0..d {
                rho1[k][flat] = acc1[k];
            }
            for slot in 0..n2 {
                k2[slot][flat] = acc2[slot];
            }
            if max_rank >= 3 {
                for slot in 0..n3 {
                    h3[slot][flat] = acc3[slot];
                }
            }
            if max_rank >= 4 {
                for slot in 0..n4 {
                    q4[slot][flat] = acc4[slot];
                }
            }
        }

        // Parity symmetrization: make z ↦ −z evenness/oddness exact in
        // floating point. neg(flat) is the node at (−j mod n) per axis.
        let neg_index = |flat: usize| -> usize {
            let mut rem = flat;
            let mut out = 0usize;
            let mut stride = 1usize;
            for _ in 0..d {
                let i = rem % n;
                rem /= n;
                let ni = (n - i) % n;
                out += ni * stride;
                stride *= n;
            }
            out
        };
        let symmetrize_even = |arr: &mut [f64]| {
            for flat in 0..nn {
                let nf = neg_index(flat);
                if nf > flat {
                    let avg = 0.5 * (arr[flat] + arr[nf]);
                    arr[flat] = avg;
                    arr[nf] = avg;
                }
            }
        };
        let symmetrize_odd = |arr: &mut [f64]| {
            for flat in 0..nn {
                let nf = neg_index(flat);
                if nf > flat {
                    let anti = 0.5 * (arr[flat] - arr[nf]);
                    arr[flat] = anti;
                    arr[nf] = -anti;
                } else if nf == flat {
                    arr[flat] = 0.0;
                }
            }
        };
        symmetrize_even(&mut rho0);
        symmetrize_even(&mut rho_z2);
        for arr in rho1.iter_mut() {
            symmetrize_odd(arr);
        }
        for arr in k2.iter_mut() {
            symmetrize_even(arr);
        }
        for arr in h3.iter_mut() {
            symmetrize_odd(arr);
        }
        for arr in q4.iter_mut() {
            symmetrize_even(arr);
        }

        // Zeroth moments with quadrature weight h^d.
        let vol = grid.cell_volume();
        let a1_bar = vol * rho0.iter().sum::<f64>();
        let a2_bar = vol * rho_z2.iter().sum::<f64>();
        let mut k0_matrix = Tensor2::zeros(d);
        for (slot, &(a, b)) in pairs.iter().enumerate() {
            let sum = vol * k2[slot].iter().sum::<f64>();
            k0_matrix.set(a, b, sum);
            k0_matrix.set(b, a, sum);
        }
        let mut h0 = Tensor3::zeros(d);
        if max_rank >= 3 {
            for (slot, _t) in triples.iter().enumerate() {
                let sum = vol * h3[slot].iter().sum::<f64>();
                // Fill all permutations of the sorted triple.
                for a in 0..d {
                    for b in 0..d {
                        for c in 0..d {
                            if map3[(a * d + b) * d + c] == slot {
                                h0.set(a, b, c, sum);
                            }
                        }
                    }
                }
            }
        }
        let mut q0 = Tensor4::zeros(d);
        if max_rank >= 4 {
            for (slot, _t) in quads.iter().enumerate() {
                let sum = vol * q4[slot].iter().sum::<f64>();
                for a in 0..d {
                    for b in 0..d {
                        for c in 0..d {
                            for e in 0..d {
                                if map4[((a * d + b) * d + c) * d + e] == slot {
                                    q0.set(a, b, c, e, sum);
                                }
                            }
                        }
                    }
                }
            }
        }

        let fft = NdFft::new(d, n);
        let k2_hat: Vec<Vec<C64>> = k2.iter().map(|arr| fft.forward(arr)).collect();
        let h3_hat: Vec<Vec<C64>> = h3.iter().map(|arr| fft.forward(arr)).collect();
        let q4_hat: Vec<Vec<C64>> = q4.iter().map(|arr| fft.forward(arr)).collect();

        let support: Vec<usize> = (0..nn).filter(|&j| rho0[j] > 0.0).collect();

        Ok(KernelStack {
            grid,
            dimension: d,
            supersample: s,
            max_rank,
            shells,
            rho0,
            rho_z2,
            rho1,
            k2,
            h3,
            q4,
            k0_matrix,
            h0,
            q0,
            a1_bar,
            a2_bar,
            k2_hat,
            h3_hat,
            q4_hat,
            support,
            fft,
            pairs,
            triples,
            quads,
            map3,
            map4,
        })
    }

    /// Slot of K̄_{ij} in the symmetric-pair storage.
    #[inline]
    pub fn k2_slot(&self, i: usize, j: usize) -> usize {
        sym_pair_index(self.dimension, i, j)
    }

    /// Slot of H̄_{ikl} in the sorted-triple storage.
    #[inline]
    pub fn h3_slot(&self, i: usize, k: usize, l: usize) -> usize {
        self.map3[(i * self.dimension + k) * self.dimension + l]
    }

    /// Slot of Q̄_{ijkl} in the sorted-quadruple storage.
    #[inline]
    pub fn q4_slot(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        self.map4[((i * self.dimension + j) * self.dimension + k) * self.dimension + l]
    }

    pub fn k2_at(&self, flat: usize, i: usize, j: usize) -> f64 {
        self.k2[self.k2_slot(i, j)][flat]
    }

    pub fn h3_at(&self, flat: usize, i: usize, k: usize, l: usize) -> f64 {
        self.h3[self.h3_slot(i, k, l)][flat]
    }

    pub fn q4_at(&self, flat: usize, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.q4[self.q4_slot(i, j, k, l)][flat]
    }

    /// Number of distinct K̄ slots.
    pub fn k2_len(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn triples(&self) -> &[Vec<usize>] {
        &self.triples
    }

    pub fn quads(&self) -> &[Vec<usize>] {
        &self.quads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{kernel_moments, second_moment_matrix};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn stack_2d(n: usize) -> KernelStack {
        let spec = KernelSpec::radial_indicator(2, 0.4).unwrap();
        let grid = TorusGrid::unit_cell(2, n).unwrap();
        KernelStack::build(&spec, grid, &KernelBuildOptions::default()).unwrap()
    }

    #[test]
    fn parity_is_exact_after_symmetrization() {
        let st = stack_2d(12);
        let grid = st.grid;
        for flat in 0..grid.node_count() {
            let idx = grid.multi_index(flat);
            let neg: Vec<usize> = idx.iter().map(|&i| (grid.n - i) % grid.n).collect();
            let nf = grid.flat_index(&neg);
            assert_eq!(st.rho0[flat], st.rho0[nf]);
            for slot in 0..st.k2.len() {
                assert_eq!(st.k2[slot][flat], st.k2[slot][nf]);
            }
            for slot in 0..st.h3.len() {
                assert_eq!(st.h3[slot][flat], -st.h3[slot][nf]);
            }
            for slot in 0..st.rho1.len() {
                assert_eq!(st.rho1[slot][flat], -st.rho1[slot][nf]);
            }
            for slot in 0..st.q4.len() {
                assert_eq!(st.q4[slot][flat], st.q4[slot][nf]);
            }
        }
        // Odd ranks integrate to zero up to summation roundoff (the paired
        // entries are exact negatives, but sequential summation does not
        // cancel them exactly).
        assert!(st.h0.max_abs() < 1e-12);
        for slot in 0..st.rho1.len() {
            assert!(st.rho1[slot].iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn trace_identities_hold_exactly() {
        let st = stack_2d(16);
        // trace K̄₀ = a₁bar and paired trace of Q̄₀ = a₂bar, by construction.
        assert_abs_diff_eq!(st.k0_matrix.trace(), st.a1_bar, epsilon = 1e-13);
        let mut paired = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                paired += st.q0.get(i, i, j, j);
            }
        }
        assert_abs_diff_eq!(paired, st.a2_bar, epsilon = 1e-13);
    }

    #[test]
    fn moments_match_quadrature_oracles() {
        let st = stack_2d(32);
        let spec = KernelSpec::radial_indicator(2, 0.4).unwrap();
        let mr = kernel_moments(&spec, 512).unwrap();
        assert!((st.a1_bar - mr.a1).abs() < 2e-3, "a1_bar = {}", st.a1_bar);
        assert!((st.a2_bar - mr.a2).abs() < 2e-3, "a2_bar = {}", st.a2_bar);
        let k0 = second_moment_matrix(&spec, 512).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (st.k0_matrix.get(i, j) - k0.get(i, j)).abs() < 2e-3,
                    "K0[{i}{j}] = {}",
                    st.k0_matrix.get(i, j)
                );
            }
        }
    }

    #[test]
    fn fft_convolution_matches_direct_sum() {
        let grid = TorusGrid::unit_cell(2, 8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let kernel: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = periodic_convolve(&grid, &kernel, &v);
        let slow = periodic_convolve_direct(&grid, &kernel, &v);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let fast_c = periodic_correlate(&grid, &kernel, &v);
        let slow_c = periodic_correlate_direct(&grid, &kernel, &v);
        for (a, b) in fast_c.iter().zip(slow_c.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn fft_of_single_mode_is_a_spike() {
        let grid = TorusGrid::unit_cell(2, 8).unwrap();
        let n = grid.n;
        let f: Vec<f64> = (0..grid.node_count())
            .map(|flat| {
                let idx = grid.multi_index(flat);
                (2.0 * std::f64::consts::PI * idx[0] as f64 / n as f64).cos()
            })
            .collect();
        let fft = NdFft::new(2, n);
        let hat = fft.forward(&f);
        // cos mode k=(1,0): spikes of height n^d/2 at (1,0) and (n−1,0).
        let spike = grid.node_count() as f64 / 2.0;
        let at = |kx: usize, ky: usize| hat[grid.flat_index(&[kx, ky])];
        assert_abs_diff_eq!(at(1, 0).re, spike, epsilon = 1e-9);
        assert_abs_diff_eq!(at(n - 1, 0).re, spike, epsilon = 1e-9);
        let mut residual = 0.0f64;
        for flat in 0..grid.node_count() {
            let idx = grid.multi_index(flat);
            if (idx[0] == 1 || idx[0] == n - 1) && idx[1] == 0 {
                continue;
            }
            residual = residual.max(hat[flat].norm());
        }
        assert!(residual < 1e-9);
    }

    #[test]
    fn even_kernel_spectrum_is_real_and_odd_spectrum_imaginary() {
        let st = stack_2d(16);
        let scale = st.k2_hat[0].iter().fold(0.0f64, |m, c| m.max(c.norm()));
        for hat in &st.k2_hat {
            for c in hat {
                assert!(c.im.abs() <= 1e-12 * scale.max(1.0));
            }
        }
        for hat in &st.h3_hat {
            for c in hat {
                assert!(c.re.abs() <= 1e-12 * scale.max(1.0));
            }
        }
    }

    #[test]
    fn box_kernel_groups_to_cell_kernel() {
        // With N_box = n_eps · N_cell the rescaled box kernel, summed over
        // the n_eps^d coarse shifts, reproduces the cell kernel exactly
        // (up to roundoff): Σ_j K̄box(z + ε j) = ε^{−d} K̄cell(z/ε).
        let spec = KernelSpec::radial_indicator(2, 0.4).unwrap();
        let ncell = 8;
        let neps = 2;
        let eps = 0.5;
        let cell_grid = TorusGrid::unit_cell(2, ncell).unwrap();
        let box_grid = TorusGrid::new(2, neps * ncell, 1.0).unwrap();
        let opts = KernelBuildOptions {
            supersample: 4,
            max_rank: 2,
        };
        let cell = KernelStack::build(&spec, cell_grid, &opts).unwrap();
        let boxk = KernelStack::build_rescaled(&spec, box_grid, eps, &opts).unwrap();
        let scale = eps.powi(-2); // ε^{−d}
        for ci in 0..cell_grid.node_count() {
            let cidx = cell_grid.multi_index(ci);
            for slot in 0..cell.k2.len() {
                let mut grouped = 0.0;
                for jx in 0..neps {
                    for jy in 0..neps {
                        let bidx = [cidx[0] + jx * ncell, cidx[1] + jy * ncell];
                        grouped += boxk.k2[slot][box_grid.flat_index(&bidx)];
                    }
                }
                let expected = scale * cell.k2[slot][ci];
                assert!(
                    (grouped - expected).abs() <= 1e-10 * scale,
                    "slot {slot} node {cidx:?}: grouped {grouped} vs {expected}"
                );
            }
        }
    }
}
