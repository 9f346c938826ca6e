//! Piecewise-constant functions at a fixed dyadic depth, hierarchical cube
//! sums, and the padded extension grid covering `3*[0,1)^D`.
//!
//! Everything supported in the reference cube vanishes outside it; integrals
//! over complements of cubes are therefore finite and are evaluated on the
//! padded grid, whose cells continue the same lattice.

use super::cube::{DyadicCube, GeomBox, MultiIndexIter};
use crate::error::{Error, Result};
use crate::scalar::Real;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// A function constant on each cell of the `2^depth`-per-side grid over
/// `[0,1)^D`. Values are stored row-major (axis 0 slowest).
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction<T, const D: usize> {
    depth: u32,
    values: Vec<T>,
}

impl<T: Real, const D: usize> GridFunction<T, D> {
    pub fn zeros(depth: u32) -> Self {
        GridFunction { depth, values: vec![T::zero(); n_cells::<D>(depth)] }
    }

    pub fn constant(depth: u32, c: T) -> Self {
        GridFunction { depth, values: vec![c; n_cells::<D>(depth)] }
    }

    pub fn from_values(depth: u32, values: Vec<T>) -> Result<Self> {
        if values.len() != n_cells::<D>(depth) {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "expected {} cells at depth {depth}, got {}",
                    n_cells::<D>(depth),
                    values.len()
                ),
            });
        }
        Ok(GridFunction { depth, values })
    }

    /// Sample a pointwise rule at cell centers.
    pub fn from_fn(depth: u32, mut f: impl FnMut(&[T; D]) -> T) -> Self {
        let m = cells_per_side(depth);
        let mut values = Vec::with_capacity(n_cells::<D>(depth));
        for idx in MultiIndexIter::new([m; D]) {
            values.push(f(&cell_center(depth, &idx)));
        }
        GridFunction { depth, values }
    }

    /// Indicator of a dyadic cube.
    pub fn indicator(depth: u32, q: &DyadicCube<D>) -> Self {
        let mut g = Self::zeros(depth);
        for i in g.cube_cells(q) {
            g.values[i] = T::one();
        }
        g
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Volume of one cell, `2^(-D*depth)`.
    pub fn cell_volume(&self) -> T {
        T::lit(0.5f64.powi((D as u32 * self.depth) as i32))
    }

    pub fn linear_index(&self, idx: &[usize; D]) -> usize {
        let m = cells_per_side(self.depth);
        idx.iter().fold(0usize, |acc, &i| acc * m + i)
    }

    pub fn center_of_linear(&self, lin: usize) -> [T; D] {
        let m = cells_per_side(self.depth);
        let mut idx = [0usize; D];
        let mut rest = lin;
        for i in (0..D).rev() {
            idx[i] = rest % m;
            rest /= m;
        }
        cell_center(self.depth, &idx)
    }

    /// Linear cell indices covered by a dyadic cube, row-major.
    pub fn cube_cells(&self, q: &DyadicCube<D>) -> Vec<usize> {
        debug_assert!(q.level <= self.depth);
        let shift = self.depth - q.level;
        let per_axis = 1usize << shift;
        let m = cells_per_side(self.depth);
        let mut out = Vec::with_capacity(per_axis.pow(D as u32));
        for off in MultiIndexIter::new([per_axis; D]) {
            let mut lin = 0usize;
            for i in 0..D {
                lin = lin * m + ((q.index[i] as usize) << shift) + off[i];
            }
            out.push(lin);
        }
        out
    }

    /// Exact integral: cell volume times the plain sum of values.
    pub fn integral(&self) -> T {
        self.values.iter().copied().sum::<T>() * self.cell_volume()
    }

    /// Mean over a dyadic cube (exact: plain mean of its cells).
    pub fn average(&self, q: &DyadicCube<D>) -> T {
        let cells = self.cube_cells(q);
        let n = T::from_count(cells.len());
        cells.into_iter().map(|i| self.values[i]).sum::<T>() / n
    }

    pub fn inner(&self, g: &GridFunction<T, D>) -> T {
        debug_assert_eq!(self.depth, g.depth);
        self.values
            .iter()
            .zip(g.values.iter())
            .map(|(&a, &b)| a * b)
            .sum::<T>()
            * self.cell_volume()
    }

    pub fn lp_norm(&self, p: T) -> T {
        debug_assert!(p >= T::one());
        let s: T = self.values.iter().map(|v| v.abs().powf(p)).sum();
        (s * self.cell_volume()).powf(T::one() / p)
    }

    pub fn linf_norm(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        GridFunction { depth: self.depth, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn abs(&self) -> Self {
        self.map(|v| v.abs())
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| c * v)
    }

    pub fn add(&self, g: &GridFunction<T, D>) -> Self {
        debug_assert_eq!(self.depth, g.depth);
        GridFunction {
            depth: self.depth,
            values: self.values.iter().zip(&g.values).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, g: &GridFunction<T, D>) -> Self {
        debug_assert_eq!(self.depth, g.depth);
        GridFunction {
            depth: self.depth,
            values: self.values.iter().zip(&g.values).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, g: &GridFunction<T, D>, c: T) {
        debug_assert_eq!(self.depth, g.depth);
        for (a, &b) in self.values.iter_mut().zip(&g.values) {
            *a += c * b;
        }
    }

    pub fn mul_pointwise(&self, g: &GridFunction<T, D>) -> Self {
        debug_assert_eq!(self.depth, g.depth);
        GridFunction {
            depth: self.depth,
            values: self.values.iter().zip(&g.values).map(|(&a, &b)| a * b).collect(),
        }
    }

    /// Copy with values zeroed outside the region (membership by cell center).
    pub fn masked(&self, region: &Region<T, D>) -> Self {
        match region {
            Region::All => self.clone(),
            Region::Empty => Self::zeros(self.depth),
            _ => {
                let m = cells_per_side(self.depth);
                let mut out = Self::zeros(self.depth);
                for (lin, idx) in MultiIndexIter::new([m; D]).enumerate() {
                    if region.contains(&cell_center(self.depth, &idx)) {
                        out.values[lin] = self.values[lin];
                    }
                }
                out
            }
        }
    }

    /// Copy with values zeroed outside a dyadic cube.
    pub fn restricted_to(&self, q: &DyadicCube<D>) -> Self {
        let mut out = Self::zeros(self.depth);
        for i in self.cube_cells(q) {
            out.values[i] = self.values[i];
        }
        out
    }

    /// Copy with values zeroed on a dyadic cube (restriction to its
    /// complement).
    pub fn zeroed_on(&self, q: &DyadicCube<D>) -> Self {
        let mut out = self.clone();
        for i in self.cube_cells(q) {
            out.values[i] = T::zero();
        }
        out
    }

    /// Is the support contained in the cube (exactly zero outside)?
    pub fn supported_in(&self, q: &DyadicCube<D>) -> bool {
        let inside: std::collections::HashSet<usize> = self.cube_cells(q).into_iter().collect();
        self.values
            .iter()
            .enumerate()
            .all(|(i, &v)| v == T::zero() || inside.contains(&i))
    }

    /// Piecewise-constant refinement to a deeper grid: each fine cell takes
    /// the value of the coarse cell containing it.
    pub fn refine(&self, to_depth: u32) -> Self {
        assert!(to_depth >= self.depth);
        let shift = to_depth - self.depth;
        let fine_m = cells_per_side(to_depth);
        let coarse_m = cells_per_side(self.depth);
        let mut values = Vec::with_capacity(n_cells::<D>(to_depth));
        for idx in MultiIndexIter::new([fine_m; D]) {
            let mut lin = 0usize;
            for i in 0..D {
                lin = lin * coarse_m + (idx[i] >> shift);
            }
            values.push(self.values[lin]);
        }
        GridFunction { depth: to_depth, values }
    }

    /// Flat CSV: one value per line, row-major.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.values {
            writeln!(out, "{v}")?;
        }
        Ok(())
    }

    pub fn read_csv(depth: u32, path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut values = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let x: f64 = t
                .parse()
                .map_err(|e| Error::config(format!("bad value {t:?} in {path:?}: {e}")))?;
            values.push(T::lit(x));
        }
        Self::from_values(depth, values)
    }
}

pub fn cells_per_side(depth: u32) -> usize {
    1usize << depth
}

pub fn n_cells<const D: usize>(depth: u32) -> usize {
    cells_per_side(depth).pow(D as u32)
}

pub fn cell_center<T: Real, const D: usize>(depth: u32, idx: &[usize; D]) -> [T; D] {
    let h = T::lit(0.5f64.powi(depth as i32));
    let half = T::lit(0.5);
    let mut c = [T::zero(); D];
    for i in 0..D {
        c[i] = (T::from_count(idx[i]) + half) * h;
    }
    c
}

/// Hierarchical sums of a grid function over every dyadic cube, built
/// bottom-up in one pass. Averages read off here agree bit-for-bit with the
/// refinement identity `avg(Q) = 2^-D * sum_i avg(Q_i)` because every
/// division is by a power of two.
pub struct CubeSums<T, const D: usize> {
    depth: u32,
    /// `levels[k]` holds plain value sums for cubes at level `k`, row-major.
    levels: Vec<Vec<T>>,
}

impl<T: Real, const D: usize> CubeSums<T, D> {
    pub fn new(f: &GridFunction<T, D>) -> Self {
        let depth = f.depth();
        let mut levels: Vec<Vec<T>> = Vec::with_capacity(depth as usize + 1);
        levels.push(f.values().to_vec());
        for k in (0..depth).rev() {
            let finer = &levels[levels.len() - 1];
            let m = cells_per_side(k);
            let fm = cells_per_side(k + 1);
            let mut coarse = vec![T::zero(); m.pow(D as u32)];
            for (lin, idx) in MultiIndexIter::new([m; D]).enumerate() {
                let mut s = T::zero();
                for bits in 0usize..(1 << D) {
                    let mut flin = 0usize;
                    for i in 0..D {
                        flin = flin * fm + 2 * idx[i] + ((bits >> i) & 1);
                    }
                    s += finer[flin];
                }
                coarse[lin] = s;
            }
            levels.push(coarse);
        }
        levels.reverse();
        CubeSums { depth, levels }
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Number of finest cells inside a cube.
    pub fn count(&self, q: &DyadicCube<D>) -> usize {
        1usize << (D as u32 * (self.depth - q.level))
    }

    /// Plain sum of cell values over the cube.
    pub fn sum(&self, q: &DyadicCube<D>) -> T {
        let m = cells_per_side(q.level);
        let lin = q.index.iter().fold(0usize, |acc, &i| acc * m + i as usize);
        self.levels[q.level as usize][lin]
    }

    /// Mean over the cube; division by a power of two, hence exact.
    pub fn average(&self, q: &DyadicCube<D>) -> T {
        self.sum(q) / T::from_count(self.count(q))
    }

    /// Integral over the cube.
    pub fn integral(&self, q: &DyadicCube<D>) -> T {
        self.sum(q) * T::lit(0.5f64.powi((D as u32 * self.depth) as i32))
    }
}

/// A function sampled on the padded lattice covering `[-1,2)^D` with the same
/// cell size as the depth-`depth` reference grid. Used wherever integrals
/// leave the reference cube (enlarged cubes `2Q`/`3Q`, tail estimates).
#[derive(Clone, Debug)]
pub struct PaddedFunction<T, const D: usize> {
    depth: u32,
    values: Vec<T>,
}

impl<T: Real, const D: usize> PaddedFunction<T, D> {
    pub fn from_fn(depth: u32, f: impl Fn(&[T; D]) -> T + Sync) -> Self {
        let pm = 3 * cells_per_side(depth);
        let mut values = Vec::with_capacity(pm.pow(D as u32));
        for idx in MultiIndexIter::new([pm; D]) {
            values.push(f(&padded_center(depth, &idx)));
        }
        PaddedFunction { depth, values }
    }

    pub fn from_values(depth: u32, values: Vec<T>) -> Self {
        assert_eq!(values.len(), (3 * cells_per_side(depth)).pow(D as u32));
        PaddedFunction { depth, values }
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn cell_volume(&self) -> T {
        T::lit(0.5f64.powi((D as u32 * self.depth) as i32))
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = ([T; D], T)> + '_ {
        let pm = 3 * cells_per_side(self.depth);
        MultiIndexIter::new([pm; D])
            .zip(self.values.iter())
            .map(move |(idx, &v)| (padded_center(self.depth, &idx), v))
    }

    /// `L^p` norm over the whole padded domain.
    pub fn lp_norm(&self, p: T) -> T {
        let s: T = self.values.iter().map(|v| v.abs().powf(p)).sum();
        (s * self.cell_volume()).powf(T::one() / p)
    }

    /// Normalized `L^p` average over a geometric box: cells selected by
    /// center membership; the discrete measure is exact when the box sides
    /// are multiples of the cell side.
    pub fn box_lp_average(&self, b: &GeomBox<T, D>, p: T) -> T {
        let mut s = T::zero();
        let mut n = 0usize;
        for (x, v) in self.iter_cells() {
            if b.contains(&x) {
                s += v.abs().powf(p);
                n += 1;
            }
        }
        if n == 0 {
            return T::zero();
        }
        (s / T::from_count(n)).powf(T::one() / p)
    }

    pub fn box_average(&self, b: &GeomBox<T, D>) -> T {
        let mut s = T::zero();
        let mut n = 0usize;
        for (x, v) in self.iter_cells() {
            if b.contains(&x) {
                s += v;
                n += 1;
            }
        }
        if n == 0 { T::zero() } else { s / T::from_count(n) }
    }
}

pub fn padded_cells_per_side(depth: u32) -> usize {
    3 * cells_per_side(depth)
}

pub fn padded_center<T: Real, const D: usize>(depth: u32, idx: &[usize; D]) -> [T; D] {
    let h = T::lit(0.5f64.powi(depth as i32));
    let half = T::lit(0.5);
    let mut c = [T::zero(); D];
    for i in 0..D {
        c[i] = (T::from_count(idx[i]) + half) * h - T::one();
    }
    c
}

/// A measurable region used to restrict operator inputs; membership is
/// decided at cell centers, so indicator restrictions partition exactly.
#[derive(Clone, Debug)]
pub enum Region<T, const D: usize> {
    All,
    Empty,
    /// Union of dyadic cubes.
    Cubes(Vec<DyadicCube<D>>),
    /// A geometric box such as `3Q`.
    Box(GeomBox<T, D>),
    /// Complement of a geometric box, e.g. `(3Q)^c`.
    BoxComplement(GeomBox<T, D>),
}

impl<T: Real, const D: usize> Region<T, D> {
    pub fn contains(&self, x: &[T; D]) -> bool {
        match self {
            Region::All => true,
            Region::Empty => false,
            Region::Cubes(cubes) => cubes.iter().any(|q| q.contains_point(x)),
            Region::Box(b) => b.contains(x),
            Region::BoxComplement(b) => !b.contains(x),
        }
    }

    pub fn triple_of(q: &DyadicCube<D>) -> Self {
        Region::Box(q.triple())
    }

    pub fn triple_complement_of(q: &DyadicCube<D>) -> Self {
        Region::BoxComplement(q.triple())
    }
}
