//! Discrete realization of the singular integral `T`, its adjoint, the
//! truncated family `T_eps`, the maximal truncation, the suppressed
//! operator, and the pointwise-domination verifiers.
//!
//! Quadrature is the midpoint rule on finest cells with the diagonal term
//! set to zero: the principal value over the own cell vanishes by symmetry
//! for antisymmetric kernels, and the same convention is applied uniformly.

use crate::accretive::AccretiveSystem;
use crate::dyadic::{
    cells_per_side, padded_center, GridFunction, MultiIndexIter, PaddedFunction, Region,
};
use crate::error::{Error, Result};
use crate::kernels::{suppress, CZKernel, SuppressionProfile};
use crate::scalar::{dist2, Real};
use rayon::prelude::*;
use serde::Serialize;
use std::sync::{Arc, OnceLock};

/// Dense kernel matrices above this many cells are streamed instead of cached.
const MATRIX_CACHE_CELL_LIMIT: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub enum OperatorMode {
    Full,
    Truncated(f64),
    Suppressed,
    TruncatedSuppressed(f64),
}

/// A kernel quadrature operator at a fixed depth.
#[derive(Clone)]
pub struct DiscreteOperator<T, const D: usize> {
    pub kernel: CZKernel<T, D>,
    depth: u32,
    truncation: Option<T>,
    mode: OperatorMode,
    matrix: Arc<OnceLock<Arc<Vec<T>>>>,
}

impl<T: Real, const D: usize> DiscreteOperator<T, D> {
    pub fn new(kernel: CZKernel<T, D>, depth: u32) -> Self {
        DiscreteOperator {
            kernel,
            depth,
            truncation: None,
            mode: OperatorMode::Full,
            matrix: Arc::new(OnceLock::new()),
        }
    }

    pub fn truncated(kernel: CZKernel<T, D>, depth: u32, eps: T) -> Result<Self> {
        if eps <= T::zero() || !eps.is_finite() {
            return Err(Error::InvalidTruncation { eps: eps.to_f64_lossy() });
        }
        Ok(DiscreteOperator {
            kernel,
            depth,
            truncation: Some(eps),
            mode: OperatorMode::Truncated(eps.to_f64_lossy()),
            matrix: Arc::new(OnceLock::new()),
        })
    }

    pub fn suppressed(
        kernel: &CZKernel<T, D>,
        depth: u32,
        phi: &Arc<SuppressionProfile<T, D>>,
    ) -> Self {
        DiscreteOperator {
            kernel: suppress(kernel, phi),
            depth,
            truncation: None,
            mode: OperatorMode::Suppressed,
            matrix: Arc::new(OnceLock::new()),
        }
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn mode(&self) -> &OperatorMode {
        &self.mode
    }

    /// Adjoint: transposed kernel, same depth and truncation. On the grid,
    /// `<Tf, g> = <f, T*g>` holds exactly because the quadrature matrix of
    /// the adjoint is the literal transpose.
    pub fn adjoint(&self) -> Self {
        DiscreteOperator {
            kernel: self.kernel.transpose(),
            depth: self.depth,
            truncation: self.truncation,
            mode: self.mode.clone(),
            matrix: Arc::new(OnceLock::new()),
        }
    }

    fn centers(&self) -> Vec<[T; D]> {
        let m = cells_per_side(self.depth);
        MultiIndexIter::new([m; D])
            .map(|idx| crate::dyadic::cell_center(self.depth, &idx))
            .collect()
    }

    fn cached_matrix(&self, centers: &[[T; D]]) -> Option<Arc<Vec<T>>> {
        let n = centers.len();
        if n > MATRIX_CACHE_CELL_LIMIT {
            return None;
        }
        Some(
            self.matrix
                .get_or_init(|| {
                    let rows: Vec<T> = (0..n)
                        .into_par_iter()
                        .flat_map_iter(|i| {
                            let xi = centers[i];
                            (0..n).map(move |j| {
                                if i == j {
                                    T::zero()
                                } else {
                                    self.kernel.eval(&xi, &centers[j])
                                }
                            })
                        })
                        .collect();
                    Arc::new(rows)
                })
                .clone(),
        )
    }

    /// Midpoint-rule application. Output cell order is fixed, so results are
    /// deterministic regardless of thread count.
    pub fn apply(&self, f: &GridFunction<T, D>) -> Result<GridFunction<T, D>> {
        if f.depth() != self.depth {
            return Err(Error::DepthMismatch { expected: self.depth, got: f.depth() });
        }
        let centers = self.centers();
        let n = centers.len();
        let vol = f.cell_volume();
        let eps2 = self.truncation.map(|e| e * e);

        let values: Vec<T> = match self.cached_matrix(&centers) {
            Some(mat) => (0..n)
                .into_par_iter()
                .map(|i| {
                    let row = &mat[i * n..(i + 1) * n];
                    let mut s = T::zero();
                    match eps2 {
                        None => {
                            for (j, &k) in row.iter().enumerate() {
                                s += k * f.values()[j];
                            }
                        }
                        Some(e2) => {
                            for (j, &k) in row.iter().enumerate() {
                                if dist2(&centers[i], &centers[j]) > e2 {
                                    s += k * f.values()[j];
                                }
                            }
                        }
                    }
                    s * vol
                })
                .collect(),
            None => (0..n)
                .into_par_iter()
                .map(|i| {
                    let xi = centers[i];
                    let mut s = T::zero();
                    for j in 0..n {
                        if j == i || f.values()[j] == T::zero() {
                            continue;
                        }
                        if let Some(e2) = eps2 {
                            if dist2(&xi, &centers[j]) <= e2 {
                                continue;
                            }
                        }
                        s += self.kernel.eval(&xi, &centers[j]) * f.values()[j];
                    }
                    s * vol
                })
                .collect(),
        };
        GridFunction::from_values(self.depth, values)
    }

    /// Evaluate `Tf` at an arbitrary point (used on the padded lattice).
    pub fn apply_at(&self, f: &GridFunction<T, D>, x: &[T; D]) -> T {
        let m = cells_per_side(self.depth);
        let vol = f.cell_volume();
        let eps2 = self.truncation.map(|e| e * e);
        let mut s = T::zero();
        for (j, idx) in MultiIndexIter::new([m; D]).enumerate() {
            let fj = f.values()[j];
            if fj == T::zero() {
                continue;
            }
            let y = crate::dyadic::cell_center(self.depth, &idx);
            if let Some(e2) = eps2 {
                if dist2(x, &y) <= e2 {
                    continue;
                }
            }
            s += self.kernel.eval(x, &y) * fj;
        }
        s * vol
    }

    /// `Tf` sampled on the padded lattice covering `3 * [0,1)^D`.
    pub fn apply_padded(&self, f: &GridFunction<T, D>) -> Result<PaddedFunction<T, D>> {
        if f.depth() != self.depth {
            return Err(Error::DepthMismatch { expected: self.depth, got: f.depth() });
        }
        let pm = 3 * cells_per_side(self.depth);
        let cells: Vec<[usize; D]> = MultiIndexIter::new([pm; D]).collect();
        let values: Vec<T> = cells
            .par_iter()
            .map(|idx| self.apply_at(f, &padded_center(self.depth, idx)))
            .collect();
        Ok(PaddedFunction::from_values(self.depth, values))
    }

    pub fn inner_pairing(&self, f: &GridFunction<T, D>, g: &GridFunction<T, D>) -> Result<T> {
        Ok(self.apply(f)?.inner(g))
    }
}

/// Apply with the input restricted to a region (by cell center), e.g.
/// `1_{(3Q')^c} f`.
pub fn restricted_apply<T: Real, const D: usize>(
    op: &DiscreteOperator<T, D>,
    f: &GridFunction<T, D>,
    region: &Region<T, D>,
) -> Result<GridFunction<T, D>> {
    op.apply(&f.masked(region))
}

/// Exact discrete maximal truncation `sup_eps |T_eps f|`. On the grid, the
/// truncated value at a cell changes only when `eps` crosses one of the
/// pairwise center distances, so scanning prefix sums of contributions in
/// decreasing-distance order realizes the supremum exactly.
pub fn maximal_truncation<T: Real, const D: usize>(
    kernel: &CZKernel<T, D>,
    f: &GridFunction<T, D>,
) -> GridFunction<T, D> {
    let depth = f.depth();
    let m = cells_per_side(depth);
    let vol = f.cell_volume();
    let sources: Vec<(usize, [T; D], T)> = MultiIndexIter::new([m; D])
        .enumerate()
        .filter(|(j, _)| f.values()[*j] != T::zero())
        .map(|(j, idx)| (j, crate::dyadic::cell_center::<T, D>(depth, &idx), f.values()[j]))
        .collect();

    let cells: Vec<[usize; D]> = MultiIndexIter::new([m; D]).collect();
    let values: Vec<T> = cells
        .par_iter()
        .enumerate()
        .map(|(i, idx)| {
            let xi = crate::dyadic::cell_center::<T, D>(depth, idx);
            let mut rows: Vec<(T, usize, T)> = sources
                .iter()
                .filter(|(j, _, _)| *j != i)
                .map(|(j, y, fy)| (dist2(&xi, y), *j, kernel.eval(&xi, y) * *fy * vol))
                .collect();
            rows.sort_unstable_by(|a, b| {
                b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1))
            });
            let mut best = T::zero();
            let mut cur = T::zero();
            let mut k = 0usize;
            while k < rows.len() {
                let d = rows[k].0;
                while k < rows.len() && rows[k].0 == d {
                    cur += rows[k].2;
                    k += 1;
                }
                best = best.max(cur.abs());
            }
            best
        })
        .collect();
    GridFunction::from_values(depth, values).expect("cell count")
}

/// Maximal truncation evaluated only at the given linear cell indices.
/// Same prefix-scan as [`maximal_truncation`].
pub fn maximal_truncation_on_cells<T: Real, const D: usize>(
    kernel: &CZKernel<T, D>,
    f: &GridFunction<T, D>,
    cells: &[usize],
) -> Vec<T> {
    let depth = f.depth();
    let m = cells_per_side(depth);
    let vol = f.cell_volume();
    let sources: Vec<(usize, [T; D], T)> = MultiIndexIter::new([m; D])
        .enumerate()
        .filter(|(j, _)| f.values()[*j] != T::zero())
        .map(|(j, idx)| (j, crate::dyadic::cell_center::<T, D>(depth, &idx), f.values()[j]))
        .collect();
    cells
        .par_iter()
        .map(|&i| {
            let xi = f.center_of_linear(i);
            let mut rows: Vec<(T, usize, T)> = sources
                .iter()
                .filter(|(j, _, _)| *j != i)
                .map(|(j, y, fy)| (dist2(&xi, y), *j, kernel.eval(&xi, y) * *fy * vol))
                .collect();
            rows.sort_unstable_by(|a, b| {
                b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1))
            });
            let mut best = T::zero();
            let mut cur = T::zero();
            let mut k = 0usize;
            while k < rows.len() {
                let d = rows[k].0;
                while k < rows.len() && rows[k].0 == d {
                    cur += rows[k].2;
                    k += 1;
                }
                best = best.max(cur.abs());
            }
            best
        })
        .collect()
}

/// Maximal truncation at an arbitrary point, by the same prefix scan over
/// sources sorted by distance.
pub fn maximal_truncation_at<T: Real, const D: usize>(
    kernel: &CZKernel<T, D>,
    f: &GridFunction<T, D>,
    x: &[T; D],
) -> T {
    let depth = f.depth();
    let m = cells_per_side(depth);
    let vol = f.cell_volume();
    let mut rows: Vec<(T, usize, T)> = MultiIndexIter::new([m; D])
        .enumerate()
        .filter(|(j, _)| f.values()[*j] != T::zero())
        .map(|(j, idx)| {
            let y = crate::dyadic::cell_center::<T, D>(depth, &idx);
            (dist2(x, &y), j, kernel.eval(x, &y) * f.values()[j] * vol)
        })
        .collect();
    rows.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    let mut best = T::zero();
    let mut cur = T::zero();
    let mut k = 0usize;
    while k < rows.len() {
        let d = rows[k].0;
        while k < rows.len() && rows[k].0 == d {
            cur += rows[k].2;
            k += 1;
        }
        best = best.max(cur.abs());
    }
    best
}

/// Mean over `Q'` of the maximal truncation applied to the part of `f`
/// living outside the enlarged cube `3Q'`.
pub fn offdiag_average<T: Real, const D: usize>(
    kernel: &CZKernel<T, D>,
    f: &GridFunction<T, D>,
    q_prime: &crate::dyadic::DyadicCube<D>,
) -> T {
    let masked = f.masked(&Region::triple_complement_of(q_prime));
    let cells = f.cube_cells(q_prime);
    let vals = maximal_truncation_on_cells(kernel, &masked, &cells);
    vals.iter().copied().sum::<T>() / T::from_count(cells.len())
}

/// Reference evaluation of `max_eps |T_eps f|` over an explicit list of
/// truncation radii, summing in plain index order. Used to cross-check the
/// distance-grid supremum: refining the radius list cannot change it.
pub fn maximal_truncation_over<T: Real, const D: usize>(
    kernel: &CZKernel<T, D>,
    f: &GridFunction<T, D>,
    epsilons: &[T],
) -> GridFunction<T, D> {
    let depth = f.depth();
    let m = cells_per_side(depth);
    let vol = f.cell_volume();
    let sources: Vec<(usize, [T; D], T)> = MultiIndexIter::new([m; D])
        .enumerate()
        .filter(|(j, _)| f.values()[*j] != T::zero())
        .map(|(j, idx)| (j, crate::dyadic::cell_center::<T, D>(depth, &idx), f.values()[j]))
        .collect();
    let cells: Vec<[usize; D]> = MultiIndexIter::new([m; D]).collect();
    let values: Vec<T> = cells
        .par_iter()
        .enumerate()
        .map(|(i, idx)| {
            let xi = crate::dyadic::cell_center::<T, D>(depth, idx);
            let mut best = T::zero();
            for &eps in epsilons {
                let e2 = eps * eps;
                let mut s = T::zero();
                for (j, y, fy) in &sources {
                    if *j == i {
                        continue;
                    }
                    if dist2(&xi, y) > e2 {
                        s += kernel.eval(&xi, y) * *fy;
                    }
                }
                best = best.max((s * vol).abs());
            }
            best
        })
        .collect();
    GridFunction::from_values(depth, values).expect("cell count")
}

/// All distinct pairwise center distances of the grid (the exact knot set of
/// the truncation parameter), in increasing order.
pub fn distance_grid<T: Real, const D: usize>(depth: u32) -> Vec<T> {
    let m = cells_per_side(depth) as i64;
    let h = T::lit(0.5f64.powi(depth as i32));
    let mut d2: Vec<i64> = Vec::new();
    match D {
        1 => {
            for k in 1..m {
                d2.push(k * k);
            }
        }
        2 => {
            for a in 0..m {
                for b in 0..m {
                    if a == 0 && b == 0 {
                        continue;
                    }
                    d2.push(a * a + b * b);
                }
            }
        }
        _ => unimplemented!("supported dimensions are 1 and 2"),
    }
    d2.sort_unstable();
    d2.dedup();
    d2.into_iter().map(|v| h * T::from_count(v as usize).sqrt()).collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CotlarReport {
    /// Worst cell ratio `T_# f / (M f + M_{q'}(T f) + M_{v'} f)`.
    pub c_cotlar: f64,
    pub max_tsharp: f64,
}

/// Pointwise domination of the maximal truncation by maximal functions of
/// `f` and `Tf`. The adjoint-side system certifies the hypotheses; its
/// nondegeneracy is checked before any ratio is formed.
pub fn cotlar_check<T: Real, const D: usize>(
    op: &DiscreteOperator<T, D>,
    adjoint_system: &AccretiveSystem<T, D>,
    f: &GridFunction<T, D>,
    q_exp: T,
    v_exp: T,
) -> Result<CotlarReport> {
    adjoint_system.check_nondegenerate()?;
    if f.values().iter().all(|v| *v == T::zero()) {
        return Ok(CotlarReport { c_cotlar: 0.0, max_tsharp: 0.0 });
    }
    let tf = op.apply(f)?;
    let tsharp = maximal_truncation(&op.kernel, f);
    let q_conj = q_exp / (q_exp - T::one());
    let v_conj = v_exp / (v_exp - T::one());
    let mf = crate::dyadic::maximal_function(f, T::one())?;
    let mq_tf = crate::dyadic::maximal_function(&tf, q_conj)?;
    let mv_f = crate::dyadic::maximal_function(f, v_conj)?;

    let mut worst = T::zero();
    let mut max_t = T::zero();
    for i in 0..f.len() {
        let den = mf.values()[i] + mq_tf.values()[i] + mv_f.values()[i];
        let num = tsharp.values()[i];
        max_t = max_t.max(num);
        if den > T::zero() {
            worst = worst.max(num / den);
        }
    }
    Ok(CotlarReport { c_cotlar: worst.to_f64_lossy(), max_tsharp: max_t.to_f64_lossy() })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DominationReport {
    /// Worst cell ratio `|T_phi f| / (T_# f + M f)`.
    pub c_suppression: f64,
}

/// The suppressed operator is pointwise dominated by the maximal truncation
/// plus the maximal function, uniformly in the profile.
pub fn suppressed_domination_check<T: Real, const D: usize>(
    kernel: &CZKernel<T, D>,
    phi: &Arc<SuppressionProfile<T, D>>,
    f: &GridFunction<T, D>,
) -> Result<DominationReport> {
    let depth = f.depth();
    let op_phi = DiscreteOperator::suppressed(kernel, depth, phi);
    let tphi_f = op_phi.apply(f)?;
    let tsharp = maximal_truncation(kernel, f);
    let mf = crate::dyadic::maximal_function(f, T::one())?;
    let mut worst = T::zero();
    for i in 0..f.len() {
        let den = tsharp.values()[i] + mf.values()[i];
        if den > T::zero() {
            worst = worst.max(tphi_f.values()[i].abs() / den);
        }
    }
    Ok(DominationReport { c_suppression: worst.to_f64_lossy() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{make_kernel, KernelKind, KernelParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hilbert_op(depth: u32) -> DiscreteOperator<f64, 1> {
        let k = make_kernel(KernelKind::Hilbert, KernelParams::default(), depth).unwrap();
        DiscreteOperator::new(k, depth)
    }

    fn random_grid(depth: u32, seed: u64) -> GridFunction<f64, 1> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GridFunction::from_fn(depth, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_maps_to_zero() {
        let op = hilbert_op(6);
        let z = GridFunction::<f64, 1>::zeros(6);
        assert!(op.apply(&z).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(maximal_truncation(&op.kernel, &z).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linearity_to_machine_precision() {
        let op = hilbert_op(6);
        let f = random_grid(6, 1);
        let g = random_grid(6, 2);
        let lhs = op.apply(&f.scale(2.0).add(&g.scale(-3.0))).unwrap();
        let rhs = op.apply(&f).unwrap().scale(2.0).add(&op.apply(&g).unwrap().scale(-3.0));
        for (a, b) in lhs.values().iter().zip(rhs.values()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn transpose_identity_is_exact_in_structure() {
        let op = hilbert_op(6);
        let adj = op.adjoint();
        for seed in 0..20 {
            let f = random_grid(6, seed);
            let g = random_grid(6, seed + 100);
            let a = op.apply(&f).unwrap().inner(&g);
            let b = adj.apply(&g).unwrap().inner(&f);
            assert!((a - b).abs() <= 1e-12 * (a.abs().max(b.abs()).max(1e-30)));
        }
    }

    #[test]
    fn antisymmetric_pairing_cancels() {
        let op = hilbert_op(7);
        for seed in 0..10 {
            let f = random_grid(7, seed);
            let tf = op.apply(&f).unwrap();
            let pairing = tf.inner(&f);
            // Normalize by the absolute mass of the bilinear sum.
            let mass: f64 = tf.abs().inner(&f.abs()).max(1e-30);
            assert!(pairing.abs() / mass < 1e-10, "seed {seed}: {pairing} vs {mass}");
        }
    }

    #[test]
    fn truncation_requires_positive_radius() {
        let k = make_kernel::<f64, 1>(KernelKind::Hilbert, KernelParams::default(), 5).unwrap();
        assert!(DiscreteOperator::truncated(k.clone(), 5, 0.0).is_err());
        assert!(DiscreteOperator::truncated(k, 5, -1.0).is_err());
    }

    #[test]
    fn truncations_are_nested() {
        // Larger radius discards a superset of pairs.
        let depth = 5;
        let k = make_kernel::<f64, 1>(KernelKind::Hilbert, KernelParams::default(), depth).unwrap();
        let f = GridFunction::<f64, 1>::indicator(depth, &crate::dyadic::DyadicCube::new(1, [0]));
        let op_small = DiscreteOperator::truncated(k.clone(), depth, 0.1).unwrap();
        let op_big = DiscreteOperator::truncated(k.clone(), depth, 0.4).unwrap();
        let full = DiscreteOperator::new(k.clone(), depth);
        let ts = maximal_truncation(&k, &f);
        let a = op_small.apply(&f).unwrap();
        let b = op_big.apply(&f).unwrap();
        let c = full.apply(&f).unwrap();
        for i in 0..f.len() {
            assert!(ts.values()[i] + 1e-13 >= a.values()[i].abs());
            assert!(ts.values()[i] + 1e-13 >= b.values()[i].abs());
            assert!(ts.values()[i] + 1e-13 >= c.values()[i].abs());
        }
    }

    #[test]
    fn maximal_truncation_is_homogeneous() {
        let depth = 6;
        let k = make_kernel::<f64, 1>(KernelKind::Hilbert, KernelParams::default(), depth).unwrap();
        let f = random_grid(depth, 9);
        let t1 = maximal_truncation(&k, &f);
        let t2 = maximal_truncation(&k, &f.scale(-2.5));
        for (a, b) in t1.values().iter().zip(t2.values()) {
            assert!((2.5 * a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn fast_maximal_truncation_matches_reference_on_distance_grid() {
        let depth = 5;
        let k = make_kernel::<f64, 1>(KernelKind::Hilbert, KernelParams::default(), depth).unwrap();
        let f = random_grid(depth, 3);
        let fast = maximal_truncation(&k, &f);
        // Radii strictly between consecutive distances select the same pair
        // sets; using midpoints of the knot set plus the far end covers every
        // regime the supremum can see.
        let knots = distance_grid::<f64, 1>(depth);
        let mut eps = vec![knots.last().unwrap() + 1.0];
        for w in knots.windows(2) {
            eps.push(0.5 * (w[0] + w[1]));
        }
        eps.push(0.5 * knots[0]);
        let slow = maximal_truncation_over(&k, &f, &eps);
        for (a, b) in fast.values().iter().zip(slow.values()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn restricted_halves_sum_to_full_apply() {
        let depth = 6;
        let op = hilbert_op(depth);
        let f = random_grid(depth, 5);
        let q = crate::dyadic::DyadicCube::<1>::new(2, [1]);
        let inside = restricted_apply(&op, &f, &Region::triple_of(&q)).unwrap();
        let outside = restricted_apply(&op, &f, &Region::triple_complement_of(&q)).unwrap();
        let full = op.apply(&f).unwrap();
        for i in 0..f.len() {
            let s = inside.values()[i] + outside.values()[i];
            assert!((s - full.values()[i]).abs() < 1e-12 * (1.0 + full.values()[i].abs()));
        }
        let empty = restricted_apply(&op, &f, &Region::Empty).unwrap();
        assert!(empty.values().iter().all(|&v| v == 0.0));
        let all = restricted_apply(&op, &f, &Region::All).unwrap();
        assert_eq!(all, full);
    }

    #[test]
    fn suppressed_equals_full_on_zero_set_support() {
        let depth = 6;
        let k = make_kernel::<f64, 1>(KernelKind::Hilbert, KernelParams::default(), depth).unwrap();
        let bad = crate::dyadic::DyadicCube::<1>::new(2, [3]);
        let phi = Arc::new(SuppressionProfile::from_cubes(depth, 1, vec![bad]).unwrap());
        // Support far from the bad cube's triple.
        let carrier = crate::dyadic::DyadicCube::<1>::new(3, [0]);
        let f = GridFunction::indicator(depth, &carrier);
        for i in f.cube_cells(&carrier) {
            assert_eq!(phi.eval(&f.center_of_linear(i)), 0.0);
        }
        let op = DiscreteOperator::new(k.clone(), depth);
        let op_phi = DiscreteOperator::suppressed(&k, depth, &phi);
        let a = op.apply(&f).unwrap();
        let b = op_phi.apply(&f).unwrap();
        // Where the profile vanishes at the target too, values agree exactly.
        for i in 0..f.len() {
            if phi.eval(&f.center_of_linear(i)) == 0.0 {
                assert_eq!(a.values()[i], b.values()[i]);
            }
        }
    }

    #[test]
    fn padded_application_extends_the_inner_one() {
        let depth = 5;
        let op = hilbert_op(depth);
        let f = random_grid(depth, 12);
        let inner = op.apply(&f).unwrap();
        let padded = op.apply_padded(&f).unwrap();
        let m = cells_per_side(depth);
        for (i, (x, v)) in padded.iter_cells().enumerate() {
            if x[0] > 0.0 && x[0] < 1.0 {
                let inner_idx = i - m;
                assert!((v - inner.values()[inner_idx]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cotlar_ratio_finite_and_zero_for_zero_input() {
        let depth = 6;
        let op = hilbert_op(depth);
        let sys = crate::accretive::make_indicator_system::<f64, 1>(depth);
        let z = GridFunction::zeros(depth);
        let r0 = cotlar_check(&op, &sys, &z, 2.0, 2.0).unwrap();
        assert_eq!(r0.c_cotlar, 0.0);
        let f = random_grid(depth, 21);
        let r = cotlar_check(&op, &sys, &f, 2.0, 2.0).unwrap();
        assert!(r.c_cotlar.is_finite() && r.c_cotlar > 0.0);
    }

    #[test]
    fn suppression_domination_holds_for_arbitrary_profile() {
        let depth = 6;
        let k = make_kernel::<f64, 1>(KernelKind::Hilbert, KernelParams::default(), depth).unwrap();
        let profile_grid =
            GridFunction::<f64, 1>::from_fn(depth, |x| 0.5 * (x[0] - 0.3).abs().min(0.2));
        let phi =
            Arc::new(SuppressionProfile::from_grid(&profile_grid, 1, 1.0).unwrap());
        let f = random_grid(depth, 33);
        let r = suppressed_domination_check(&k, &phi, &f).unwrap();
        assert!(r.c_suppression.is_finite());
        // The constant is modest for the interval.
        assert!(r.c_suppression < 20.0, "{r:?}");
    }
}
