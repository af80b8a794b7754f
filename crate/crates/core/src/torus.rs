//! Uniform periodic grids on the torus and vector-valued nodal fields.
//!
//! Flattening convention (used consistently across the crate, including the
//! FFT machinery): axis 0 varies fastest, so a multi-index `(i₀, …, i_{d−1})`
//! maps to `i₀ + n·i₁ + n²·i₂`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{PerihomError, Result};
use crate::tensors::check_dimension;

/// A uniform grid with `n` nodes per axis on the torus `[0, box_length)^d`.
/// Nodes sit at `j·h` with `h = box_length / n` (no duplicated endpoint).
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct TorusGrid {
    pub dimension: usize,
    pub n: usize,
    pub box_length: f64,
}

impl TorusGrid {
    pub fn new(dimension: usize, n: usize, box_length: f64) -> Result<Self> {
        check_dimension(dimension)?;
        if n < 2 {
            return Err(PerihomError::InvalidArgument(
                "grid needs at least 2 nodes per axis".into(),
            ));
        }
        if box_length <= 0.0 {
            return Err(PerihomError::InvalidArgument(
                "box length must be positive".into(),
            ));
        }
        Ok(TorusGrid {
            dimension,
            n,
            box_length,
        })
    }

    /// The unit periodicity cell `[0,1)^d`.
    pub fn unit_cell(dimension: usize, n: usize) -> Result<Self> {
        Self::new(dimension, n, 1.0)
    }

    /// Mesh size `h = box_length / n`.
    pub fn h(&self) -> f64 {
        self.box_length / self.n as f64
    }

    /// Total number of nodes `n^d`.
    pub fn node_count(&self) -> usize {
        self.n.pow(self.dimension as u32)
    }

    /// Quadrature weight of one node, `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dimension as i32)
    }

    /// Multi-index of a flat node index (axis 0 fastest).
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0usize; self.dimension];
        for i in idx.iter_mut() {
            *i = flat % self.n;
            flat /= self.n;
        }
        idx
    }

    /// Flat index of a multi-index, wrapping each axis periodically.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dimension);
        let mut flat = 0usize;
        for k in (0..self.dimension).rev() {
            flat = flat * self.n + (idx[k] % self.n);
        }
        flat
    }

    /// Flat index after a signed periodic shift of a multi-index.
    pub fn shifted_flat(&self, idx: &[usize], shift: &[isize]) -> usize {
        let n = self.n as isize;
        let mut flat = 0usize;
        for k in (0..self.dimension).rev() {
            let s = (idx[k] as isize + shift[k]).rem_euclid(n) as usize;
            flat = flat * self.n + s;
        }
        flat
    }

    /// Physical coordinates of a node.
    pub fn coords(&self, flat: usize) -> Vec<f64> {
        let h = self.h();
        self.multi_index(flat).iter().map(|&i| i as f64 * h).collect()
    }

    /// Integer Fourier frequencies per axis in FFT bin order:
    /// `0, 1, …, n/2, −(n−1)/2, …, −1` (standard wrap-around layout).
    pub fn frequencies(&self) -> Vec<i64> {
        let n = self.n as i64;
        (0..n).map(|i| if i <= n / 2 { i } else { i - n }).collect()
    }
}

/// A vector-valued nodal field on a [`TorusGrid`]. Data is stored
/// component-major: component `c` occupies the contiguous slice
/// `[c·node_count, (c+1)·node_count)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicField {
    pub grid: TorusGrid,
    pub components: usize,
    data: Vec<f64>,
}

impl PeriodicField {
    pub fn zeros(grid: TorusGrid, components: usize) -> Self {
        PeriodicField {
            grid,
            components,
            data: vec![0.0; components * grid.node_count()],
        }
    }

    /// Field sampled from a function of the node coordinates.
    pub fn from_fn(
        grid: TorusGrid,
        components: usize,
        f: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        let nn = grid.node_count();
        let mut field = Self::zeros(grid, components);
        for flat in 0..nn {
            let x = grid.coords(flat);
            let v = f(&x);
            if v.len() != components {
                return Err(PerihomError::InvalidArgument(
                    "sampling function returned wrong number of components".into(),
                ));
            }
            for (c, val) in v.into_iter().enumerate() {
                field.data[c * nn + flat] = val;
            }
        }
        Ok(field)
    }

    /// Scalar field sampled from a function of the node coordinates.
    pub fn scalar_from_fn(grid: TorusGrid, f: impl Fn(&[f64]) -> f64) -> Self {
        let nn = grid.node_count();
        let mut field = Self::zeros(grid, 1);
        for flat in 0..nn {
            let x = grid.coords(flat);
            field.data[flat] = f(&x);
        }
        field
    }

    /// Uniform random entries in [−1, 1] from the supplied generator.
    pub fn random(grid: TorusGrid, components: usize, rng: &mut impl rand::Rng) -> Self {
        let mut field = Self::zeros(grid, components);
        for v in field.data.iter_mut() {
            *v = rng.random_range(-1.0..=1.0);
        }
        field
    }

    pub fn node_count(&self) -> usize {
        self.grid.node_count()
    }

    /// Contiguous values of one component.
    pub fn component(&self, c: usize) -> &[f64] {
        let nn = self.node_count();
        &self.data[c * nn..(c + 1) * nn]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let nn = self.node_count();
        &mut self.data[c * nn..(c + 1) * nn]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, flat: usize) -> f64 {
        self.data[c * self.node_count() + flat]
    }

    pub fn set(&mut self, c: usize, flat: usize, v: f64) {
        let nn = self.node_count();
        self.data[c * nn + flat] = v;
    }

    /// Serialize into the cache format: a single JSON header line
    /// `{"dimension":…,"N":…,"rank":…,"box_length":…}` terminated by `\n`,
    /// followed by the raw little-endian f64 data in component-major order.
    pub fn to_binary(&self) -> Vec<u8> {
        let header = format!(
            "{{\"dimension\":{},\"N\":{},\"rank\":{},\"box_length\":{}}}\n",
            self.grid.dimension, self.grid.n, self.components, self.grid.box_length
        );
        let mut out = header.into_bytes();
        out.reserve(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse the cache format produced by [`PeriodicField::to_binary`].
    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| PerihomError::Format("missing field header line".into()))?;
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| PerihomError::Format(format!("bad field header: {e}")))?;
        let dim = header["dimension"]
            .as_u64()
            .ok_or_else(|| PerihomError::Format("header lacks dimension".into()))?
            as usize;
        let n = header["N"]
            .as_u64()
            .ok_or_else(|| PerihomError::Format("header lacks N".into()))? as usize;
        let rank = header["rank"]
            .as_u64()
            .ok_or_else(|| PerihomError::Format("header lacks rank".into()))?
            as usize;
        let box_length = header["box_length"]
            .as_f64()
            .ok_or_else(|| PerihomError::Format("header lacks box_length".into()))?;
        let grid = TorusGrid::new(dim, n, box_length)?;
        let nn = grid.node_count();
        let body = &bytes[nl + 1..];
        if body.len() != rank * nn * 8 {
            return Err(PerihomError::Format(format!(
                "field body holds {} bytes, expected {} for rank {rank} on {n}^{dim}",
                body.len(),
                rank * nn * 8
            )));
        }
        let mut field = Self::zeros(grid, rank);
        for (i, chunk) in body.chunks_exact(8).enumerate() {
            field.data[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(field)
    }

    /// Per-component average over the torus.
    pub fn mean(&self) -> Vec<f64> {
        let nn = self.node_count() as f64;
        (0..self.components)
            .map(|c| self.component(c).iter().sum::<f64>() / nn)
            .collect()
    }

    /// Subtract the mean of every component in place; returns the means that
    /// were removed.
    pub fn project_mean_zero(&mut self) -> Vec<f64> {
        let means = self.mean();
        let nn = self.node_count();
        for (c, &m) in means.iter().enumerate() {
            for v in &mut self.data[c * nn..(c + 1) * nn] {
                *v -= m;
            }
        }
        means
    }

    /// Discrete L² inner product `h^d Σ_nodes u·v` (all components).
    pub fn inner(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        debug_assert_eq!(self.components, other.components);
        let w = self.grid.cell_volume();
        w * self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    }

    /// Weighted inner product `h^d Σ w(x) u(x)·v(x)` with a scalar weight.
    pub fn inner_weighted(&self, other: &Self, weight: &PeriodicField) -> f64 {
        debug_assert_eq!(weight.components, 1);
        debug_assert_eq!(self.grid, other.grid);
        let nn = self.node_count();
        let vol = self.grid.cell_volume();
        let w = weight.component(0);
        let mut s = 0.0;
        for c in 0..self.components {
            let a = self.component(c);
            let b = other.component(c);
            for i in 0..nn {
                s += w[i] * a[i] * b[i];
            }
        }
        vol * s
    }

    /// Discrete L² norm.
    pub fn norm_l2(&self) -> f64 {
        self.inner(self).sqrt()
    }

    /// Largest absolute nodal value.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    /// L² norm of the difference.
    pub fn error_l2(&self, other: &Self) -> f64 {
        let mut diff = self.clone();
        diff.axpy(-1.0, other);
        diff.norm_l2()
    }

    /// Write the field in the cache format of [`PeriodicField::to_binary`].
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_binary())?;
        Ok(())
    }

    /// Read a field written by [`write_binary`](Self::write_binary).
    pub fn read_binary(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_binary(&bytes)
    }

    /// Write the field as CSV: one row per node with the multi-index, the
    /// node coordinates, and all component values.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let d = self.grid.dimension;
        let mut header: Vec<String> = (0..d).map(|k| format!("i{k}")).collect();
        header.extend((0..d).map(|k| format!("x{k}")));
        header.extend((0..self.components).map(|c| format!("u{c}")));
        wtr.write_record(&header)
            .map_err(|e| PerihomError::Format(e.to_string()))?;
        for flat in 0..self.node_count() {
            let idx = self.grid.multi_index(flat);
            let x = self.grid.coords(flat);
            let mut row: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
            row.extend(x.iter().map(|v| format!("{v}")));
            row.extend((0..self.components).map(|c| format!("{}", self.get(c, flat))));
            wtr.write_record(&row)
                .map_err(|e| PerihomError::Format(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Tile a field on the unit cell periodically onto a box grid with
/// `factor` repetitions per axis and the given physical box length. The
/// value at box multi-index `j` is the cell value at `j mod n_cell`, so the
/// fast-variable samples on the box agree bit-for-bit with the cell samples.
pub fn tile_to_box(cell: &PeriodicField, factor: usize, box_length: f64) -> Result<PeriodicField> {
    if factor == 0 {
        return Err(PerihomError::InvalidArgument(
            "tiling factor must be positive".into(),
        ));
    }
    let cg = cell.grid;
    let grid = TorusGrid::new(cg.dimension, factor * cg.n, box_length)?;
    let mut out = PeriodicField::zeros(grid, cell.components);
    let nn = grid.node_count();
    for flat in 0..nn {
        let idx = grid.multi_index(flat);
        let cidx: Vec<usize> = idx.iter().map(|&i| i % cg.n).collect();
        let cflat = cg.flat_index(&cidx);
        for c in 0..cell.components {
            out.set(c, flat, cell.get(c, cflat));
        }
    }
    Ok(out)
}

/// Sample a [`crate::model::CoefField`] on a grid as a scalar field.
pub fn sample_coefficient(
    grid: TorusGrid,
    field: &crate::model::CoefField,
) -> Result<PeriodicField> {
    let nn = grid.node_count();
    let mut out = PeriodicField::zeros(grid, 1);
    for flat in 0..nn {
        let x = grid.coords(flat);
        out.set(0, flat, field.eval(&x)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn flat_and_multi_index_round_trip() {
        let grid = TorusGrid::new(3, 5, 2.0).unwrap();
        for flat in 0..grid.node_count() {
            let idx = grid.multi_index(flat);
            assert_eq!(grid.flat_index(&idx), flat);
        }
        // Axis 0 fastest.
        assert_eq!(grid.flat_index(&[1, 0, 0]), 1);
        assert_eq!(grid.flat_index(&[0, 1, 0]), 5);
        assert_eq!(grid.flat_index(&[0, 0, 1]), 25);
        // Periodic wrapping, including negative shifts.
        assert_eq!(grid.shifted_flat(&[0, 0, 0], &[-1, 0, 0]), 4);
    }

    #[test]
    fn mean_projection_kills_constants() {
        let grid = TorusGrid::unit_cell(2, 8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut f = PeriodicField::random(grid, 2, &mut rng);
        f.project_mean_zero();
        for m in f.mean() {
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn inner_product_matches_quadrature_of_trig_mode() {
        // ∫ sin²(2πx₁) over the unit square is ½, and the trapezoid/midpoint
        // rule on a periodic grid integrates this exactly.
        let grid = TorusGrid::unit_cell(2, 16).unwrap();
        let f = PeriodicField::scalar_from_fn(grid, |x| (2.0 * std::f64::consts::PI * x[0]).sin());
        assert_abs_diff_eq!(f.inner(&f), 0.5, epsilon = 1e-13);
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let grid = TorusGrid::new(2, 6, 0.5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let f = PeriodicField::random(grid, 3, &mut rng);
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        let g = PeriodicField::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn frequencies_follow_fft_layout() {
        let grid = TorusGrid::unit_cell(2, 8).unwrap();
        assert_eq!(grid.frequencies(), vec![0, 1, 2, 3, 4, -3, -2, -1]);
        let grid5 = TorusGrid::new(1, 5, 1.0).unwrap();
        assert_eq!(grid5.frequencies(), vec![0, 1, 2, -2, -1]);
    }

    #[test]
    fn csv_export_has_expected_shape() {
        let grid = TorusGrid::unit_cell(2, 3).unwrap();
        let f = PeriodicField::scalar_from_fn(grid, |x| x[0] + 10.0 * x[1]);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.trim().lines().collect();
        assert_eq!(lines.len(), 1 + 9);
        assert_eq!(lines[0], "i0,i1,x0,x1,u0");
    }
}
