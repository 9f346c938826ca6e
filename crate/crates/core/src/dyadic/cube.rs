//! Dyadic cubes of the unit cube `[0,1)^D`, addressed by level and an
//! integer index vector, plus the concentric geometric boxes `2Q` and `3Q`.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A node of the dyadic tree: the half-open box
/// `prod_i [ index[i]*2^-level, (index[i]+1)*2^-level )`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct DyadicCube<const D: usize> {
    pub level: u32,
    pub index: [u32; D],
}

impl<const D: usize> DyadicCube<D> {
    /// The reference cube `[0,1)^D`.
    pub fn root() -> Self {
        DyadicCube { level: 0, index: [0; D] }
    }

    pub fn new(level: u32, index: [u32; D]) -> Self {
        debug_assert!(index.iter().all(|&i| (i as u64) < (1u64 << level)));
        DyadicCube { level, index }
    }

    /// Side length `2^-level`.
    pub fn side<T: Real>(&self) -> T {
        T::lit(0.5f64.powi(self.level as i32))
    }

    /// Volume `2^(-D*level)`.
    pub fn volume<T: Real>(&self) -> T {
        T::lit(0.5f64.powi((D as u32 * self.level) as i32))
    }

    /// Lower corner.
    pub fn lower<T: Real>(&self) -> [T; D] {
        let h: T = self.side();
        let mut lo = [T::zero(); D];
        for i in 0..D {
            lo[i] = T::from_count(self.index[i] as usize) * h;
        }
        lo
    }

    /// Center point.
    pub fn center<T: Real>(&self) -> [T; D] {
        let h: T = self.side();
        let half = T::lit(0.5);
        let mut c = self.lower::<T>();
        for x in c.iter_mut() {
            *x = *x + half * h;
        }
        c
    }

    /// The `2^D` children, in lexicographic bit order (bit `i` shifts axis `i`).
    pub fn children(&self, depth: u32) -> Result<Vec<DyadicCube<D>>> {
        if self.level >= depth {
            return Err(Error::LeafCube { level: self.level, depth });
        }
        let mut out = Vec::with_capacity(1 << D);
        for bits in 0u32..(1 << D) {
            let mut idx = [0u32; D];
            for i in 0..D {
                idx[i] = 2 * self.index[i] + ((bits >> i) & 1);
            }
            out.push(DyadicCube { level: self.level + 1, index: idx });
        }
        Ok(out)
    }

    pub fn parent(&self) -> Option<DyadicCube<D>> {
        if self.level == 0 {
            return None;
        }
        let mut idx = [0u32; D];
        for i in 0..D {
            idx[i] = self.index[i] / 2;
        }
        Some(DyadicCube { level: self.level - 1, index: idx })
    }

    /// Ancestor at a given level (`level <= self.level`).
    pub fn ancestor_at(&self, level: u32) -> DyadicCube<D> {
        debug_assert!(level <= self.level);
        let shift = self.level - level;
        let mut idx = [0u32; D];
        for i in 0..D {
            idx[i] = self.index[i] >> shift;
        }
        DyadicCube { level, index: idx }
    }

    /// Does this cube contain `other` (as a set, i.e. `other ⊆ self`)?
    pub fn contains_cube(&self, other: &DyadicCube<D>) -> bool {
        other.level >= self.level && other.ancestor_at(self.level) == *self
    }

    pub fn contains_point<T: Real>(&self, x: &[T; D]) -> bool {
        let h: T = self.side();
        (0..D).all(|i| {
            let lo = T::from_count(self.index[i] as usize) * h;
            x[i] >= lo && x[i] < lo + h
        })
    }

    /// Concentric geometric box with side `factor * side(Q)`; `factor = 3`
    /// gives `3Q`, which may stick out of the reference cube.
    pub fn concentric<T: Real>(&self, factor: f64) -> GeomBox<T, D> {
        let c = self.center::<T>();
        let r = T::lit(factor / 2.0) * self.side::<T>();
        let mut lo = [T::zero(); D];
        let mut hi = [T::zero(); D];
        for i in 0..D {
            lo[i] = c[i] - r;
            hi[i] = c[i] + r;
        }
        GeomBox { lo, hi }
    }

    pub fn triple<T: Real>(&self) -> GeomBox<T, D> {
        self.concentric(3.0)
    }

    pub fn double<T: Real>(&self) -> GeomBox<T, D> {
        self.concentric(2.0)
    }

    /// Stable display form, used in error messages and file names.
    pub fn label(&self) -> String {
        let idx: Vec<String> = self.index.iter().map(|i| i.to_string()).collect();
        format!("L{}I{}", self.level, idx.join("_"))
    }

    /// All dyadic cubes of the reference cube from level 0 down to `depth`,
    /// level by level, lexicographic within a level.
    pub fn all(depth: u32) -> CubeIter<D> {
        CubeIter { level: 0, inner: MultiIndexIter::new([1usize; D]), depth, done: false }
    }

    /// All dyadic subcubes of `self` (including `self`) down to `depth`.
    pub fn descendants(&self, depth: u32) -> Vec<DyadicCube<D>> {
        let mut out = Vec::new();
        for level in self.level..=depth {
            let per_axis = 1usize << (level - self.level);
            for off in MultiIndexIter::new([per_axis; D]) {
                let mut idx = [0u32; D];
                for i in 0..D {
                    idx[i] = (self.index[i] << (level - self.level)) + off[i] as u32;
                }
                out.push(DyadicCube { level, index: idx });
            }
        }
        out
    }
}

/// Iterator over all cubes of the tree, by level then lexicographic index.
pub struct CubeIter<const D: usize> {
    level: u32,
    inner: MultiIndexIter<D>,
    depth: u32,
    done: bool,
}

impl<const D: usize> Iterator for CubeIter<D> {
    type Item = DyadicCube<D>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.done {
                return None;
            }
            if let Some(off) = self.inner.next() {
                let mut idx = [0u32; D];
                for i in 0..D {
                    idx[i] = off[i] as u32;
                }
                return Some(DyadicCube { level: self.level, index: idx });
            }
            if self.level == self.depth {
                self.done = true;
                return None;
            }
            self.level += 1;
            self.inner = MultiIndexIter::new([1usize << self.level; D]);
        }
    }
}

/// Odometer over a rectangular multi-index range `[0, extent)` per axis,
/// axis 0 slowest (row-major order).
pub struct MultiIndexIter<const D: usize> {
    extent: [usize; D],
    cur: [usize; D],
    done: bool,
}

impl<const D: usize> MultiIndexIter<D> {
    pub fn new(extent: [usize; D]) -> Self {
        let done = extent.iter().any(|&e| e == 0);
        MultiIndexIter { extent, cur: [0; D], done }
    }
}

impl<const D: usize> Iterator for MultiIndexIter<D> {
    type Item = [usize; D];

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.cur;
        for i in (0..D).rev() {
            self.cur[i] += 1;
            if self.cur[i] < self.extent[i] {
                return Some(out);
            }
            self.cur[i] = 0;
        }
        self.done = true;
        Some(out)
    }
}

/// For a cube of diameter `eps/8` containing a point, the doubled cube
/// contains the ball of radius `c * eps` around that point and sits inside
/// the ball of radius `eps`. The inclusion constant is forced by the
/// geometry: the double extends at least half a side beyond the point in
/// every axis, and a side is `eps / (8 sqrt(D))`.
pub fn ball_in_doubled_cube_constant<const D: usize>() -> f64 {
    1.0 / (16.0 * (D as f64).sqrt())
}

/// Axis-aligned half-open box, used for the concentric enlargements `2Q`, `3Q`
/// and for the shifted grids of the maximal function.
#[derive(Clone, Copy, Debug)]
pub struct GeomBox<T, const D: usize> {
    pub lo: [T; D],
    pub hi: [T; D],
}

impl<T: Real, const D: usize> GeomBox<T, D> {
    pub fn contains(&self, x: &[T; D]) -> bool {
        (0..D).all(|i| x[i] >= self.lo[i] && x[i] < self.hi[i])
    }

    pub fn volume(&self) -> T {
        let mut v = T::one();
        for i in 0..D {
            v = v * (self.hi[i] - self.lo[i]);
        }
        v
    }

    /// Distance from `x` to the complement of the box: zero outside, the
    /// minimal coordinate distance to the boundary inside. 1-Lipschitz in `x`.
    pub fn dist_to_complement(&self, x: &[T; D]) -> T {
        let mut d = T::infinity();
        for i in 0..D {
            let a = x[i] - self.lo[i];
            let b = self.hi[i] - x[i];
            d = d.min(a).min(b);
        }
        d.max(T::zero())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_children_bisect() {
        let root = DyadicCube::<1>::root();
        let kids = root.children(8).unwrap();
        assert_eq!(kids.len(), 2);
        assert_eq!(kids[0].lower::<f64>(), [0.0]);
        assert_eq!(kids[1].lower::<f64>(), [0.5]);
        assert_eq!(kids[0].side::<f64>(), 0.5);
    }

    #[test]
    fn square_children_are_the_four_quadrants() {
        let root = DyadicCube::<2>::root();
        let kids = root.children(5).unwrap();
        assert_eq!(kids.len(), 4);
        let mut lowers: Vec<[f64; 2]> = kids.iter().map(|q| q.lower()).collect();
        lowers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(lowers, vec![[0.0, 0.0], [0.0, 0.5], [0.5, 0.0], [0.5, 0.5]]);
    }

    #[test]
    fn child_volumes_sum_to_parent() {
        let q = DyadicCube::<2>::new(2, [1, 3]);
        let kids = q.children(5).unwrap();
        let total: f64 = kids.iter().map(|c| c.volume::<f64>()).sum();
        assert_eq!(total, q.volume::<f64>());
    }

    #[test]
    fn leaf_refuses_to_subdivide() {
        let q = DyadicCube::<1>::new(3, [5]);
        assert!(matches!(q.children(3), Err(Error::LeafCube { .. })));
    }

    #[test]
    fn containment_and_ancestors() {
        let q = DyadicCube::<1>::new(2, [1]);
        let sub = DyadicCube::<1>::new(4, [5]);
        assert!(q.contains_cube(&sub));
        assert!(!sub.contains_cube(&q));
        assert_eq!(sub.ancestor_at(2), q);
        assert!(q.contains_cube(&q));
    }

    #[test]
    fn triple_box_may_exceed_the_reference_cube() {
        let q = DyadicCube::<1>::root();
        let t = q.triple::<f64>();
        assert_eq!(t.lo, [-1.0]);
        assert_eq!(t.hi, [2.0]);
        assert_eq!(t.dist_to_complement(&[0.5]), 1.5);
        assert_eq!(t.dist_to_complement(&[-2.0]), 0.0);
    }

    #[test]
    fn doubled_cube_inclusions_hold() {
        // Any cube of diameter eps/8 containing x0: its double contains
        // B(x0, c*eps) and lies inside B(x0, eps).
        let c = ball_in_doubled_cube_constant::<2>();
        let eps = 1.0;
        let side = eps / (8.0 * 2f64.sqrt());
        for shift in [0.0, 0.2, 0.45] {
            // x0 sits at relative position `shift` inside the cube.
            let x0 = [side * (0.5 + shift), side * (0.5 - shift)];
            let lo = [0.0, 0.0];
            // Double of the cube [0, side)^2.
            let dlo = [lo[0] - side / 2.0, lo[1] - side / 2.0];
            let dhi = [lo[0] + 1.5 * side, lo[1] + 1.5 * side];
            // Ball of radius c*eps around x0 inside the double: the nearest
            // face is at distance >= side/2 - |shift|*side >= c*eps.
            let nearest_face = (x0[0] - dlo[0])
                .min(dhi[0] - x0[0])
                .min(x0[1] - dlo[1])
                .min(dhi[1] - x0[1]);
            assert!(nearest_face >= c * eps - 1e-12);
            // The double inside B(x0, eps): its far corner is within eps.
            let far = ((dhi[0] - x0[0]).max(x0[0] - dlo[0]).powi(2)
                + (dhi[1] - x0[1]).max(x0[1] - dlo[1]).powi(2))
            .sqrt();
            assert!(far <= eps);
        }
    }

    #[test]
    fn cube_enumeration_counts() {
        let n: usize = DyadicCube::<1>::all(3).count();
        assert_eq!(n, 1 + 2 + 4 + 8);
        let n2: usize = DyadicCube::<2>::all(2).count();
        assert_eq!(n2, 1 + 4 + 16);
    }

    #[test]
    fn descendants_include_self_and_cells() {
        let q = DyadicCube::<1>::new(1, [1]);
        let subs = q.descendants(3);
        assert_eq!(subs.len(), 1 + 2 + 4);
        assert!(subs.iter().all(|s| q.contains_cube(s)));
    }
}
