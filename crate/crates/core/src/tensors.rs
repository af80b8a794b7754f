//! Small dense tensors of rank 2–4 over runtime dimension `d ∈ {1,2,3}`,
//! with the index conventions used throughout the toolkit.
//!
//! Conventions (fixed once, used everywhere):
//! - Vector gradients: `(Du)_{kl} = ∂u_k/∂x_l`.
//! - Hessians are stored as rank-3 tensors `M^{jkl} = ∂²u_j/∂x_k∂x_l`
//!   (component first, symmetric derivative pair last).
//! - Fourth-order tensors contract Hessians as
//!   `[C M]_i = Σ_{jkl} c^{ijkl} ∂_j∂_k u_l`,
//!   which is well defined thanks to the minor symmetry `c^{ijkl} = c^{ijlk}`.
//! - The quadratic form on matrices is `⟨C W, W⟩ = Σ c^{ijkl} W_{ij} W_{kl}`.

use serde::{Deserialize, Serialize};

use crate::error::{PerihomError, Result};

/// Dense `d×d` matrix stored row-major.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Tensor2 {
    d: usize,
    v: Vec<f64>,
}

/// Dense rank-3 tensor (`d³` entries) stored row-major.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Tensor3 {
    d: usize,
    v: Vec<f64>,
}

/// Dense rank-4 tensor (`d⁴` entries) stored row-major.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Tensor4 {
    d: usize,
    v: Vec<f64>,
}

macro_rules! common_tensor_impl {
    ($t:ty, $rank:expr) => {
        impl $t {
            /// Zero tensor in dimension `d`.
            pub fn zeros(d: usize) -> Self {
                Self {
                    d,
                    v: vec![0.0; d.pow($rank)],
                }
            }

            /// Spatial dimension.
            pub fn dim(&self) -> usize {
                self.d
            }

            /// Flat read-only view of the entries (row-major).
            pub fn as_slice(&self) -> &[f64] {
                &self.v
            }

            /// Flat mutable view of the entries (row-major).
            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.v
            }

            /// Largest absolute entry.
            pub fn max_abs(&self) -> f64 {
                self.v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
            }

            /// Frobenius norm.
            pub fn frobenius_norm(&self) -> f64 {
                self.v.iter().map(|x| x * x).sum::<f64>().sqrt()
            }

            /// Entry-wise linear update `self += s · other`.
            pub fn axpy(&mut self, s: f64, other: &Self) {
                assert_eq!(self.d, other.d, "dimension mismatch");
                for (a, b) in self.v.iter_mut().zip(other.v.iter()) {
                    *a += s * b;
                }
            }

            /// Entry-wise scaling.
            pub fn scale(&mut self, s: f64) {
                for a in self.v.iter_mut() {
                    *a *= s;
                }
            }

            /// Maximum absolute entry-wise difference to `other`.
            pub fn max_abs_diff(&self, other: &Self) -> f64 {
                assert_eq!(self.d, other.d, "dimension mismatch");
                self.v
                    .iter()
                    .zip(other.v.iter())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            }
        }
    };
}

common_tensor_impl!(Tensor2, 2);
common_tensor_impl!(Tensor3, 3);
common_tensor_impl!(Tensor4, 4);

impl Tensor2 {
    /// `s · I` in dimension `d`.
    pub fn scaled_identity(d: usize, s: f64) -> Self {
        let mut t = Self::zeros(d);
        for i in 0..d {
            t.set(i, i, s);
        }
        t
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.d + j]
    }

    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        self.v[i * self.d + j] = x;
    }

    pub fn add_to(&mut self, i: usize, j: usize, x: f64) {
        self.v[i * self.d + j] += x;
    }

    pub fn trace(&self) -> f64 {
        (0..self.d).map(|i| self.get(i, i)).sum()
    }

    /// Maximum deviation from matrix symmetry.
    pub fn asymmetry(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.d {
            for j in (i + 1)..self.d {
                m = m.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        m
    }

    /// Eigenvalues of the symmetrized matrix, ascending (d ≤ 3).
    pub fn symmetric_eigenvalues(&self) -> Vec<f64> {
        let d = self.d;
        let mut m = nalgebra::DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = 0.5 * (self.get(i, j) + self.get(j, i));
            }
        }
        let mut eig: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        eig
    }
}

impl Tensor3 {
    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.d + j) * self.d + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.v[self.idx(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, x: f64) {
        let n = self.idx(i, j, k);
        self.v[n] = x;
    }

    pub fn add_to(&mut self, i: usize, j: usize, k: usize, x: f64) {
        let n = self.idx(i, j, k);
        self.v[n] += x;
    }
}

impl Tensor4 {
    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        ((i * self.d + j) * self.d + k) * self.d + l
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.v[self.idx(i, j, k, l)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, x: f64) {
        let n = self.idx(i, j, k, l);
        self.v[n] = x;
    }

    pub fn add_to(&mut self, i: usize, j: usize, k: usize, l: usize, x: f64) {
        let n = self.idx(i, j, k, l);
        self.v[n] += x;
    }

    /// Quadratic form `⟨C W, W⟩ = Σ c^{ijkl} W_{ij} W_{kl}` for a matrix `W`.
    pub fn quadratic_form(&self, w: &Tensor2) -> f64 {
        assert_eq!(self.d, w.dim(), "dimension mismatch");
        let d = self.d;
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        s += self.get(i, j, k, l) * w.get(i, j) * w.get(k, l);
                    }
                }
            }
        }
        s
    }

    /// Rank-one quadratic form `Σ c^{ijkl} ξ_i η_j ξ_k η_l`.
    pub fn rank_one_form(&self, xi: &[f64], eta: &[f64]) -> f64 {
        let d = self.d;
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        s += self.get(i, j, k, l) * xi[i] * eta[j] * xi[k] * eta[l];
                    }
                }
            }
        }
        s
    }

    /// Contraction with a Hessian tensor: `out_i = Σ_{jkl} c^{ijkl} M_{l,j,k}`
    /// where `M_{l,j,k} = ∂_j∂_k u_l` is stored component-first.
    pub fn apply_to_hessian(&self, m: &Tensor3) -> Vec<f64> {
        assert_eq!(self.d, m.dim(), "dimension mismatch");
        let d = self.d;
        let mut out = vec![0.0; d];
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        s += self.get(i, j, k, l) * m.get(l, j, k);
                    }
                }
            }
            out[i] = s;
        }
        out
    }

    /// Maximum violation of the elasticity symmetries
    /// `c^{ijkl} = c^{klij} = c^{jikl} = c^{ijlk}`.
    pub fn elasticity_symmetry_violation(&self) -> f64 {
        let d = self.d;
        let mut m = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        let c = self.get(i, j, k, l);
                        m = m.max((c - self.get(k, l, i, j)).abs());
                        m = m.max((c - self.get(j, i, k, l)).abs());
                        m = m.max((c - self.get(i, j, l, k)).abs());
                    }
                }
            }
        }
        m
    }

    /// Voigt matrix of the quadratic form on symmetric matrices, in the
    /// orthonormal symmetric basis (off-diagonal basis matrices carry a √2
    /// weight), so that its eigenvalues are the exact extrema of
    /// `⟨C W, W⟩ / |W|²` over symmetric `W`.
    pub fn voigt_matrix(&self) -> nalgebra::DMatrix<f64> {
        let d = self.d;
        let pairs = sym_pairs(d);
        let n = pairs.len();
        let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
        let sqrt2 = std::f64::consts::SQRT_2;
        for (p, &(a, b)) in pairs.iter().enumerate() {
            let wp = if a == b { 1.0 } else { sqrt2 };
            for (q, &(c, e)) in pairs.iter().enumerate() {
                let wq = if c == e { 1.0 } else { sqrt2 };
                // Symmetrize over the minor index pairs so the Voigt form is
                // exactly the quadratic form on symmetric matrices even when
                // the tensor carries small asymmetries.
                let avg1 = 0.5 * (self.get(a, b, c, e) + self.get(b, a, c, e));
                let avg = 0.5 * (avg1 + 0.5 * (self.get(a, b, e, c) + self.get(b, a, e, c)));
                m[(p, q)] = wp * wq * avg;
            }
        }
        // Exact numerical symmetry for the eigensolver.
        let mt = m.transpose();
        0.5 * (m + mt)
    }

    /// Eigenvalues of the Voigt matrix, ascending.
    pub fn voigt_eigenvalues(&self) -> Vec<f64> {
        let mut eig: Vec<f64> = self
            .voigt_matrix()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        eig
    }
}

/// Ordered index pairs `(a, b)` with `a ≤ b`, the storage order for
/// symmetric-pair families (`d(d+1)/2` entries).
pub fn sym_pairs(d: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(d * (d + 1) / 2);
    for a in 0..d {
        for b in a..d {
            pairs.push((a, b));
        }
    }
    pairs
}

/// Position of the unordered pair `{a, b}` in the [`sym_pairs`] order.
pub fn sym_pair_index(d: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    // Row a starts after Σ_{r<a} (d - r) = a(2d + 1 - a)/2 entries.
    a * (2 * d + 1 - a) / 2 + (b - a)
}

/// Checks that a dimension is one the toolkit supports.
pub fn check_dimension(d: usize) -> Result<()> {
    if (1..=3).contains(&d) {
        Ok(())
    } else {
        Err(PerihomError::InvalidArgument(format!(
            "dimension {d} unsupported (expected 1, 2, or 3)"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sym_pair_index_is_consistent_with_enumeration() {
        for d in 1..=3 {
            let pairs = sym_pairs(d);
            for (p, &(a, b)) in pairs.iter().enumerate() {
                assert_eq!(sym_pair_index(d, a, b), p);
                assert_eq!(sym_pair_index(d, b, a), p);
            }
            assert_eq!(pairs.len(), d * (d + 1) / 2);
        }
    }

    #[test]
    fn quadratic_form_matches_rank_one_form_on_outer_products() {
        let d = 3;
        let mut c = Tensor4::zeros(d);
        // An arbitrary fully populated tensor.
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        c.set(i, j, k, l, ((i + 2 * j + 3 * k + 5 * l) as f64).sin());
                    }
                }
            }
        }
        let xi = [0.3, -1.2, 0.7];
        let eta = [1.1, 0.4, -0.6];
        let mut w = Tensor2::zeros(d);
        for i in 0..d {
            for j in 0..d {
                w.set(i, j, xi[i] * eta[j]);
            }
        }
        assert_abs_diff_eq!(
            c.quadratic_form(&w),
            c.rank_one_form(&xi, &eta),
            epsilon = 1e-12
        );
    }

    #[test]
    fn voigt_eigenvalues_of_isotropic_tensor() {
        // κ (δδ + δδ + δδ): on symmetric W the form is κ((tr W)² + 2|W|²),
        // so the Voigt eigenvalues in d=2 are {2κ, 2κ, 4κ}.
        let d = 2;
        let kappa = 0.25;
        let mut c = Tensor4::zeros(d);
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        let v = kappa
                            * ((((i == j) && (k == l)) as u8 as f64)
                                + (((i == k) && (j == l)) as u8 as f64)
                                + (((i == l) && (j == k)) as u8 as f64));
                        c.set(i, j, k, l, v);
                    }
                }
            }
        }
        let eig = c.voigt_eigenvalues();
        assert_abs_diff_eq!(eig[0], 2.0 * kappa, epsilon = 1e-12);
        assert_abs_diff_eq!(eig[1], 2.0 * kappa, epsilon = 1e-12);
        assert_abs_diff_eq!(eig[2], 4.0 * kappa, epsilon = 1e-12);
        assert!(c.elasticity_symmetry_violation() < 1e-15);
    }
}
