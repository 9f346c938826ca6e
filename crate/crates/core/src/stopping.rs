//! Stopping-time machinery: the Calderon-Zygmund decomposition of a test
//! function at a size threshold, the three-condition stopping scan
//! (testing blow-up, off-diagonal blow-up, degenerate mean), the iterated
//! two-family forest with per-generation measure certificates, the induced
//! suppression profile, and the verifiers for the modified test functions
//! under the suppressed operator.

use crate::accretive::{AccretiveSystem, SparseFamily};
use crate::dyadic::{
    padded_cells_per_side, padded_center, CubeSums, DyadicCube, GridFunction, MultiIndexIter,
};
use crate::error::{Error, Result};
use crate::kernels::{CZKernel, SuppressionProfile};
use crate::operators::{
    maximal_truncation_on_cells, offdiag_average, DiscreteOperator,
};
use crate::scalar::Real;
use serde::Serialize;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Result of splitting `b` at a size threshold over a base cube: `good` is
/// bounded, the bad parts have exact zero mean on disjoint maximal cubes,
/// and `b = good + sum of bad parts` cell by cell.
#[derive(Clone, Debug)]
pub struct CZDecomposition<T, const D: usize> {
    pub base: DyadicCube<D>,
    pub original: GridFunction<T, D>,
    pub good: GridFunction<T, D>,
    pub bad_cubes: Vec<DyadicCube<D>>,
    pub bad_parts: BTreeMap<DyadicCube<D>, GridFunction<T, D>>,
    /// The tail envelope `sum_Q (side(Q) / (side(Q) + |x - c_Q|))^(D+alpha)`
    /// sampled on the inner grid.
    pub envelope: GridFunction<T, D>,
    pub envelope_exponent: f64,
    pub threshold: f64,
    pub size_exponent: f64,
    /// The base cube itself met the threshold; nothing was split.
    pub vacuous: bool,
    /// A finest-depth cube met the threshold; no further subdivision exists.
    pub depth_truncated: bool,
}

impl<T: Real, const D: usize> CZDecomposition<T, D> {
    /// Total measure of the bad cubes and its Chebyshev bound
    /// `|Q0| * avg_{Q0}|b|^p / threshold`.
    pub fn measure_certificate(&self) -> (f64, f64) {
        let sum: f64 = self.bad_cubes.iter().map(|q| q.volume::<f64>()).sum();
        let pe = T::lit(self.size_exponent);
        let cells = self.original.cube_cells(&self.base);
        let avg_p = cells
            .iter()
            .map(|&i| self.original.values()[i].abs().powf(pe))
            .sum::<T>()
            .to_f64_lossy()
            / cells.len() as f64;
        (sum, self.base.volume::<f64>() * avg_p / self.threshold)
    }

    /// Envelope value at an arbitrary point (exact formula, usable on the
    /// padded lattice).
    pub fn envelope_at(&self, x: &[T; D]) -> T {
        let expo = T::lit(self.envelope_exponent);
        let mut s = T::zero();
        for q in &self.bad_cubes {
            let side = q.side::<T>();
            let c = q.center::<T>();
            let r = crate::scalar::dist(x, &c);
            s += (side / (side + r)).powf(expo);
        }
        s
    }

    /// Sup-norm bound certified for the good part when the split is not
    /// vacuous: the threshold to the `1/p`, times `2^(D/p)` because a bad
    /// cube's parent stayed below the threshold.
    pub fn good_bound(&self) -> f64 {
        self.threshold.powf(1.0 / self.size_exponent)
            * 2f64.powf(D as f64 / self.size_exponent)
    }
}

/// Maximal subcubes of `base` where `fires` holds, by top-down scan.
/// Returns the cubes, whether the base itself fired, and whether any
/// selected cube sits at the finest depth.
fn maximal_cubes<const D: usize>(
    base: &DyadicCube<D>,
    depth: u32,
    mut fires: impl FnMut(&DyadicCube<D>) -> bool,
) -> (Vec<DyadicCube<D>>, bool, bool) {
    let mut selected = Vec::new();
    let mut at_leaf = false;
    if fires(base) {
        return (vec![*base], true, base.level == depth);
    }
    let mut stack = match base.children(depth) {
        Ok(c) => c,
        Err(_) => return (selected, false, false),
    };
    while let Some(q) = stack.pop() {
        if fires(&q) {
            at_leaf |= q.level == depth;
            selected.push(q);
        } else if q.level < depth {
            stack.extend(q.children(depth).expect("level checked"));
        }
    }
    selected.sort();
    (selected, false, at_leaf)
}

/// Split `b` over `q0` at the size threshold: bad cubes are the maximal
/// dyadic subcubes with `avg |b|^p >= threshold`; on them the good part is
/// the plain average, elsewhere it is `b` itself.
pub fn cz_decompose<T: Real, const D: usize>(
    b: &GridFunction<T, D>,
    q0: &DyadicCube<D>,
    p: f64,
    threshold: f64,
    alpha: f64,
) -> Result<CZDecomposition<T, D>> {
    if !(threshold > 0.0) {
        return Err(Error::config(format!("split threshold {threshold} must be positive")));
    }
    if !b.supported_in(q0) {
        return Err(Error::SupportViolation {
            context: format!("split requires supp b inside {}", q0.label()),
        });
    }
    let depth = b.depth();
    let pe = T::lit(p);
    let sums_p = CubeSums::new(&b.map(|v| v.abs().powf(pe)));
    let thr = T::lit(threshold);
    let (bad_cubes, vacuous, depth_truncated) =
        maximal_cubes(q0, depth, |q| sums_p.average(q) >= thr);

    let sums_b = CubeSums::new(b);
    let mut good = b.clone();
    let mut bad_parts = BTreeMap::new();
    for q in &bad_cubes {
        let avg = sums_b.average(q);
        let mut part = GridFunction::zeros(depth);
        for i in b.cube_cells(q) {
            part.values_mut()[i] = b.values()[i] - avg;
            good.values_mut()[i] = avg;
        }
        bad_parts.insert(*q, part);
    }

    let envelope_exponent = D as f64 + alpha;
    let mut dec = CZDecomposition {
        base: *q0,
        original: b.clone(),
        good,
        bad_cubes,
        bad_parts,
        envelope: GridFunction::zeros(depth),
        envelope_exponent,
        threshold,
        size_exponent: p,
        vacuous,
        depth_truncated,
    };
    dec.envelope = GridFunction::from_fn(depth, |x| dec.envelope_at(x));
    Ok(dec)
}

/// `||envelope||_{L^u}` over the padded box, against `|Q0|^{1/u}`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EnvelopeNormReport {
    pub u: f64,
    pub norm: f64,
    pub base_scale: f64,
    pub ratio: f64,
}

pub fn error_envelope_norm<T: Real, const D: usize>(
    dec: &CZDecomposition<T, D>,
    u: f64,
) -> Result<EnvelopeNormReport> {
    if !(u >= 1.0 && u.is_finite()) {
        return Err(Error::ExponentRange { context: format!("envelope exponent {u}") });
    }
    let depth = dec.original.depth();
    let ue = T::lit(u);
    let pm = padded_cells_per_side(depth);
    let vol = dec.original.cell_volume();
    let mut s = T::zero();
    for idx in MultiIndexIter::new([pm; D]) {
        let x = padded_center::<T, D>(depth, &idx);
        s += dec.envelope_at(&x).powf(ue);
    }
    let norm = (s * vol).powf(T::one() / ue).to_f64_lossy();
    let base_scale = dec.base.volume::<f64>().powf(1.0 / u);
    Ok(EnvelopeNormReport { u, norm, base_scale, ratio: norm / base_scale })
}

/// Knobs of the stopping construction.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StoppingParams {
    /// Bad-cube measure budget per cube.
    pub delta: f64,
    /// Size-threshold numerator; the split threshold is `cz_const / delta`,
    /// with `cz_const` raised to the measured `p`-th power of the system
    /// size constant when that is larger.
    pub cz_const: f64,
    /// Degenerate-mean cutoff, strictly below 1.
    pub eta: f64,
    /// Testing blow-up budget; `None` picks it from the measured headroom.
    pub eps: Option<f64>,
    /// Off-diagonal exceptional fraction; `None` picks it likewise.
    pub sigma: Option<f64>,
    /// Scan the off-diagonal condition. May be disabled only for
    /// antisymmetric kernels.
    pub use_offdiag: bool,
    /// Suppression power for the induced profile.
    pub suppression_power: u32,
}

impl Default for StoppingParams {
    fn default() -> Self {
        StoppingParams {
            delta: 1.0 / 64.0,
            cz_const: 16.0,
            eta: 0.5,
            eps: None,
            sigma: None,
            use_offdiag: false,
            suppression_power: 1,
        }
    }
}

/// Outcome of the three-condition scan below one cube.
#[derive(Clone, Debug, Serialize)]
pub struct TbStoppingOutcome<const D: usize> {
    #[serde(skip)]
    pub cubes: Vec<DyadicCube<D>>,
    pub stopped_fraction: f64,
    /// Measured sparseness margin `1 - stopped_fraction`.
    pub tau_measured: f64,
    /// A priori margin from the measure chain (may be small; the measured
    /// value is the binding certificate).
    pub tau_chain: f64,
    pub fired_testing: usize,
    pub fired_offdiag: usize,
    pub fired_degenerate: usize,
    pub depth_truncated: bool,
}

/// Inputs the scan needs about one cube.
pub struct TbStoppingInputs<'a, T, const D: usize> {
    pub b: &'a GridFunction<T, D>,
    pub good: &'a GridFunction<T, D>,
    pub envelope: &'a GridFunction<T, D>,
    pub tsharp_b: &'a GridFunction<T, D>,
    pub maxfn_b: &'a GridFunction<T, D>,
    pub kernel: &'a CZKernel<T, D>,
}

/// Maximal subcubes of `q` where any active condition fires:
/// `avg (T_# b + M b + envelope)^p > 1/eps`, or (optionally)
/// `avg T_#(1_{(3Q')^c} b) > c_sigma`, or `|avg good| <= eta`.
/// Firing at `q` itself means the parameters leave no sparseness margin.
#[allow(clippy::too_many_arguments)]
pub fn tb_stopping_cubes<T: Real, const D: usize>(
    q: &DyadicCube<D>,
    inputs: &TbStoppingInputs<'_, T, D>,
    p: f64,
    eps: f64,
    c_sigma: f64,
    sigma_budget: f64,
    eta: f64,
    use_offdiag: bool,
    size_const: f64,
) -> Result<TbStoppingOutcome<D>> {
    if !use_offdiag && !inputs.kernel.antisymmetric {
        return Err(Error::config(
            "the off-diagonal stopping condition may be skipped only for antisymmetric kernels",
        ));
    }
    if !(eta < 1.0 && eta > 0.0) {
        return Err(Error::config(format!("degeneracy cutoff eta = {eta} must lie in (0,1)")));
    }
    let depth = inputs.b.depth();
    let pe = T::lit(p);
    let test_grid = GridFunction::from_values(
        depth,
        (0..inputs.b.len())
            .map(|i| {
                (inputs.tsharp_b.values()[i] + inputs.maxfn_b.values()[i]
                    + inputs.envelope.values()[i])
                    .powf(pe)
            })
            .collect(),
    )?;
    let sums_test = CubeSums::new(&test_grid);
    let sums_good = CubeSums::new(inputs.good);
    let inv_eps = T::lit(1.0 / eps);
    let eta_t = T::lit(eta);
    let c_sigma_t = T::lit(c_sigma);

    let mut fired_testing = 0usize;
    let mut fired_offdiag = 0usize;
    let mut fired_degenerate = 0usize;
    let fires = |qq: &DyadicCube<D>| -> bool {
        if sums_test.average(qq) > inv_eps {
            fired_testing += 1;
            return true;
        }
        if sums_good.average(qq).abs() <= eta_t {
            fired_degenerate += 1;
            return true;
        }
        if use_offdiag && offdiag_average(inputs.kernel, inputs.b, qq) > c_sigma_t {
            fired_offdiag += 1;
            return true;
        }
        false
    };
    let (cubes, base_fired, depth_truncated) = maximal_cubes(q, depth, fires);
    if base_fired {
        return Err(Error::NoSparsenessMargin { cube: q.label() });
    }
    let stopped: f64 = cubes.iter().map(|c| c.volume::<f64>()).sum();
    let fraction = stopped / q.volume::<f64>();
    if fraction >= 1.0 {
        return Err(Error::NoSparsenessMargin { cube: q.label() });
    }

    // Chain value: degenerate-mean headroom minus the testing and
    // off-diagonal budgets actually spent.
    let p_prime = p / (p - 1.0);
    let headroom = ((1.0 - eta) / size_const.max(1.0)).powf(p_prime);
    let a_q = sums_test.average(q).to_f64_lossy();
    let tau_chain = headroom - eps * a_q - sigma_budget;

    Ok(TbStoppingOutcome {
        cubes,
        stopped_fraction: fraction,
        tau_measured: 1.0 - fraction,
        tau_chain,
        fired_testing,
        fired_offdiag,
        fired_degenerate,
        depth_truncated,
    })
}

/// Off-diagonal verifier below one cube: Chebyshev control of the cubes
/// violating the maximal-average condition at level `lambda`, then the
/// off-diagonal averages over the remaining (ample) subcubes.
#[derive(Clone, Debug, Serialize)]
pub struct OffdiagReport {
    pub lambda: f64,
    /// `avg_Q [M_p b + M_u(T b)]`, the mass driving the Chebyshev bound.
    pub chebyshev_mass: f64,
    pub violator_measure: f64,
    pub violator_bound: f64,
    pub ample_fraction: f64,
    pub worst_average: f64,
}

pub fn offdiag_verify<T: Real, const D: usize>(
    sys: &AccretiveSystem<T, D>,
    op: &DiscreteOperator<T, D>,
    q: &DyadicCube<D>,
    lambda: f64,
    level_cap: u32,
) -> Result<OffdiagReport> {
    if !(lambda > 0.0) {
        return Err(Error::config(format!("offdiag level {lambda} must be positive")));
    }
    let (_, b) = sys.governing(q)?;
    let depth = sys.depth();
    let cap = level_cap.min(depth);
    let p = if sys.p.is_finite() { sys.p } else { 2.0 };
    let u = if sys.u.is_finite() { sys.u } else { 2.0 };
    let tb = op.apply(b)?;
    let mp_b = crate::dyadic::maximal_function(b, T::lit(p))?;
    let mu_tb = crate::dyadic::maximal_function(&tb, T::lit(u))?;
    let g = mp_b.add(&mu_tb);
    let sums_g = CubeSums::new(&g);
    let lam = T::lit(lambda);

    let (violators, base_violates, _) = maximal_cubes(q, depth, |qq| sums_g.average(qq) > lam);
    let violator_measure: f64 = if base_violates {
        q.volume::<f64>()
    } else {
        violators.iter().map(|c| c.volume::<f64>()).sum()
    };
    let chebyshev_mass = sums_g.average(q).to_f64_lossy();
    let violator_bound = chebyshev_mass * q.volume::<f64>() / lambda;

    let mut worst = T::zero();
    if !base_violates {
        for sub in q.descendants(cap) {
            if violators.iter().any(|v| v.contains_cube(&sub)) {
                continue;
            }
            worst = worst.max(offdiag_average(&op.kernel, b, &sub));
        }
    }
    Ok(OffdiagReport {
        lambda,
        chebyshev_mass,
        violator_measure,
        violator_bound,
        ample_fraction: 1.0 - violator_measure / q.volume::<f64>(),
        worst_average: worst.to_f64_lossy(),
    })
}

/// Everything recorded about one stopping cube during iteration.
pub struct ForestNode<T, const D: usize> {
    pub cube: DyadicCube<D>,
    pub generation: usize,
    pub decomposition: CZDecomposition<T, D>,
    pub outcome: TbStoppingOutcome<D>,
    pub c_sigma: f64,
}

/// The iterated families: `t_generations[k]` are the testing-stopping cubes
/// of generation `k` (generation 0 is the base cube), `b_generations[k]`
/// the size-stopping cubes produced while processing generation `k`.
pub struct StoppingForest<T, const D: usize> {
    pub base: DyadicCube<D>,
    pub depth: u32,
    pub nodes: BTreeMap<DyadicCube<D>, ForestNode<T, D>>,
    pub t_generations: Vec<Vec<DyadicCube<D>>>,
    pub b_generations: Vec<Vec<DyadicCube<D>>>,
    pub tau_measured: f64,
    pub tau_chain: f64,
    pub delta: f64,
    pub cz_const_effective: f64,
    pub eps_used: f64,
    pub sigma_used: f64,
    pub eta: f64,
    pub size_exponent: f64,
    pub size_const: f64,
    pub depth_truncated: bool,
}

impl<T: Real, const D: usize> StoppingForest<T, D> {
    pub fn all_bad_cubes(&self) -> Vec<DyadicCube<D>> {
        let mut out: Vec<_> = self.b_generations.iter().flatten().copied().collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn all_members(&self) -> Vec<DyadicCube<D>> {
        let mut out: Vec<_> = self.t_generations.iter().flatten().copied().collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn total_bad_measure(&self) -> f64 {
        self.all_bad_cubes().iter().map(|q| q.volume::<f64>()).sum()
    }

    /// Per-generation measures and their certified bounds.
    pub fn report(&self) -> ForestReport {
        let base_vol = self.base.volume::<f64>();
        let t_measures: Vec<f64> = self
            .t_generations
            .iter()
            .map(|g| g.iter().map(|q| q.volume::<f64>()).sum())
            .collect();
        let b_measures: Vec<f64> = self
            .b_generations
            .iter()
            .map(|g| g.iter().map(|q| q.volume::<f64>()).sum())
            .collect();
        let t_bounds: Vec<f64> = (0..t_measures.len())
            .map(|k| (1.0 - self.tau_measured).powi(k as i32) * base_vol)
            .collect();
        let b_bounds: Vec<f64> = (0..b_measures.len())
            .map(|k| self.delta * (1.0 - self.tau_measured).powi(k as i32) * base_vol)
            .collect();
        let generations_certified =
            t_measures.iter().zip(&t_bounds).all(|(m, b)| *m <= b + 1e-12)
                && b_measures.iter().zip(&b_bounds).all(|(m, b)| *m <= b + 1e-12);
        ForestReport {
            base: self.base.label(),
            node_count: self.nodes.len(),
            t_generation_measures: t_measures,
            b_generation_measures: b_measures,
            t_generation_bounds: t_bounds,
            b_generation_bounds: b_bounds,
            generations_certified,
            tau_measured: self.tau_measured,
            tau_chain: self.tau_chain,
            delta: self.delta,
            cz_const_effective: self.cz_const_effective,
            eps_used: self.eps_used,
            sigma_used: self.sigma_used,
            total_bad_measure: self.total_bad_measure(),
            total_bad_bound: self.delta / self.tau_measured.max(1e-300) * base_vol,
            depth_truncated: self.depth_truncated,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ForestReport {
    pub base: String,
    pub node_count: usize,
    pub t_generation_measures: Vec<f64>,
    pub b_generation_measures: Vec<f64>,
    pub t_generation_bounds: Vec<f64>,
    pub b_generation_bounds: Vec<f64>,
    pub generations_certified: bool,
    pub tau_measured: f64,
    pub tau_chain: f64,
    pub delta: f64,
    pub cz_const_effective: f64,
    pub eps_used: f64,
    pub sigma_used: f64,
    pub total_bad_measure: f64,
    pub total_bad_bound: f64,
    pub depth_truncated: bool,
}

/// Iterate the stopping construction below `base` for one system under the
/// maximal truncation of `kernel`. Each testing-stopping cube restarts the
/// construction with its own test function.
pub fn iterate_forest<T: Real, const D: usize>(
    sys: &AccretiveSystem<T, D>,
    kernel: &CZKernel<T, D>,
    base: &DyadicCube<D>,
    params: &StoppingParams,
) -> Result<StoppingForest<T, D>> {
    let depth = sys.depth();
    let p = if sys.p.is_finite() { sys.p } else { 2.0 };
    let alpha = kernel.alpha.to_f64_lossy();
    let op = DiscreteOperator::new(kernel.clone(), depth);

    // Measured size constant over the cubes below the base.
    let mut size_const = 0.0f64;
    for q in base.descendants(depth) {
        if let Some(b) = sys.get(&q) {
            let pe = T::lit(p);
            let cells = b.cube_cells(&q);
            let n = cells.len();
            let s: T = cells.iter().map(|&i| b.values()[i].abs().powf(pe)).sum();
            size_const = size_const.max((s.to_f64_lossy() / n as f64).powf(1.0 / p));
        }
    }
    let cz_const_effective = params.cz_const.max(size_const.powf(p));
    let threshold = cz_const_effective / params.delta;
    let p_prime = p / (p - 1.0);
    let headroom = ((1.0 - params.eta) / size_const.max(1.0)).powf(p_prime);
    let sigma_used =
        if params.use_offdiag { params.sigma.unwrap_or(headroom / 4.0) } else { 0.0 };

    // The testing budget comes from the base cube's own measured mass.
    let b_base = sys.get(base).ok_or_else(|| Error::MissingInput {
        context: format!("system has no test function for {}", base.label()),
    })?;
    let eps_used = match params.eps {
        Some(e) => e,
        None => {
            let dec = cz_decompose(b_base, base, p, threshold, alpha)?;
            let maxfn = crate::dyadic::maximal_function(b_base, T::one())?;
            let pe = T::lit(p);
            let cells = b_base.cube_cells(base);
            let tvals = maximal_truncation_on_cells(kernel, b_base, &cells);
            let mass: f64 = cells
                .iter()
                .zip(&tvals)
                .map(|(&i, &t)| (t + maxfn.values()[i] + dec.envelope.values()[i]).powf(pe))
                .sum::<T>()
                .to_f64_lossy()
                / cells.len() as f64;
            headroom / (4.0 * mass.max(1e-12))
        }
    };

    let mut nodes: BTreeMap<DyadicCube<D>, ForestNode<T, D>> = BTreeMap::new();
    let mut t_generations = vec![vec![*base]];
    let mut b_generations: Vec<Vec<DyadicCube<D>>> = Vec::new();
    let mut tau_measured = 1.0f64;
    let mut tau_chain = f64::INFINITY;
    let mut depth_truncated = false;

    let mut generation = 0usize;
    loop {
        let current = t_generations[generation].clone();
        let mut next_t: Vec<DyadicCube<D>> = Vec::new();
        let mut next_b: Vec<DyadicCube<D>> = Vec::new();
        for q in &current {
            let b = sys.get(q).ok_or_else(|| Error::MissingInput {
                context: format!("system has no test function for {}", q.label()),
            })?;
            if q.level == depth {
                // Finest-depth member: nothing below it to scan.
                depth_truncated = true;
                let dec = cz_decompose(b, q, p, threshold, alpha)?;
                nodes.insert(
                    *q,
                    ForestNode {
                        cube: *q,
                        generation,
                        decomposition: dec,
                        outcome: TbStoppingOutcome {
                            cubes: Vec::new(),
                            stopped_fraction: 0.0,
                            tau_measured: 1.0,
                            tau_chain: headroom,
                            fired_testing: 0,
                            fired_offdiag: 0,
                            fired_degenerate: 0,
                            depth_truncated: true,
                        },
                        c_sigma: 0.0,
                    },
                );
                continue;
            }
            let dec = cz_decompose(b, q, p, threshold, alpha)?;
            let (bad_sum, bad_bound) = dec.measure_certificate();
            debug_assert!(bad_sum <= bad_bound + 1e-12);
            next_b.extend(dec.bad_cubes.iter().copied());

            let mut tsharp = GridFunction::zeros(depth);
            {
                let cells = b.cube_cells(q);
                let vals = maximal_truncation_on_cells(kernel, b, &cells);
                for (c, v) in cells.iter().zip(vals) {
                    tsharp.values_mut()[*c] = v;
                }
            }
            let maxfn = crate::dyadic::maximal_function(b, T::one())?;
            let c_sigma = if params.use_offdiag {
                // Pick the Chebyshev level that prices the exceptional set
                // at the sigma budget, then take the worst ample average as
                // the firing threshold: the stopping cubes of the
                // off-diagonal condition are then violators, so their
                // measure is at most sigma |Q| by construction.
                let mp_b = crate::dyadic::maximal_function(b, T::lit(p))?;
                let mu_tb = crate::dyadic::maximal_function(&op.apply(b)?, T::lit(p))?;
                let mass = CubeSums::new(&mp_b.add(&mu_tb)).average(q).to_f64_lossy();
                let lambda = (mass / sigma_used).max(1.0);
                offdiag_verify(sys, &op, q, lambda, depth)?.worst_average
            } else {
                0.0
            };
            let inputs = TbStoppingInputs {
                b,
                good: &dec.good,
                envelope: &dec.envelope,
                tsharp_b: &tsharp,
                maxfn_b: &maxfn,
                kernel,
            };
            let outcome = tb_stopping_cubes(
                q,
                &inputs,
                p,
                eps_used,
                c_sigma,
                sigma_used,
                params.eta,
                params.use_offdiag,
                size_const,
            )?;
            tau_measured = tau_measured.min(outcome.tau_measured);
            tau_chain = tau_chain.min(outcome.tau_chain);
            depth_truncated |= outcome.depth_truncated | dec.depth_truncated;
            next_t.extend(outcome.cubes.iter().copied());
            nodes.insert(
                *q,
                ForestNode { cube: *q, generation, decomposition: dec, outcome, c_sigma },
            );
        }
        b_generations.push(next_b);
        if next_t.is_empty() {
            break;
        }
        t_generations.push(next_t);
        generation += 1;
    }

    Ok(StoppingForest {
        base: *base,
        depth,
        nodes,
        t_generations,
        b_generations,
        tau_measured,
        tau_chain,
        delta: params.delta,
        cz_const_effective,
        eps_used,
        sigma_used,
        eta: params.eta,
        size_exponent: p,
        size_const,
        depth_truncated,
    })
}

/// Suppression profile from the union of the forests' bad cubes (two
/// forests merge their families so both sides share one profile).
pub fn merged_profile<T: Real, const D: usize>(
    forests: &[&StoppingForest<T, D>],
    m: u32,
) -> Result<Arc<SuppressionProfile<T, D>>> {
    let depth = forests
        .first()
        .map(|f| f.depth)
        .ok_or_else(|| Error::MissingInput { context: "no forest given".into() })?;
    let mut cubes: Vec<DyadicCube<D>> = Vec::new();
    for f in forests {
        cubes.extend(f.all_bad_cubes());
    }
    cubes.sort();
    cubes.dedup();
    Ok(Arc::new(SuppressionProfile::from_cubes(depth, m, cubes)?))
}

/// Package the forest's good parts as a test-function system on the
/// stopping family, with the measured sparseness and nondegeneracy floor.
pub fn forest_to_sparse_system<T: Real, const D: usize>(
    forest: &StoppingForest<T, D>,
) -> Result<AccretiveSystem<T, D>> {
    let mut assignment = BTreeMap::new();
    for (q, node) in &forest.nodes {
        assignment.insert(*q, node.decomposition.good.clone());
    }
    let members: Vec<DyadicCube<D>> = assignment.keys().copied().collect();
    let family = SparseFamily::new(members.clone(), forest.tau_measured.max(1e-9), 0.0)?;
    // Nondegeneracy floor over admissible pairs, measured exactly; the scan
    // construction keeps it above the degeneracy cutoff.
    let mut c0 = f64::INFINITY;
    for (q, b) in &assignment {
        let sums = CubeSums::new(b);
        for sub in q.descendants(forest.depth) {
            if family.ancestor(&sub) == *q {
                c0 = c0.min(sums.average(&sub).to_f64_lossy().abs());
            }
        }
    }
    let family = SparseFamily::new(members, forest.tau_measured.max(1e-9), c0)?;
    family.verify_sparseness()?;
    let mut sys =
        AccretiveSystem::new(assignment, forest.depth, f64::INFINITY, forest.size_exponent)?;
    sys.buffered = true;
    Ok(sys.with_sparse(family))
}

/// Verifier for the modified system under the suppressed operator: on every
/// admissible subcube of every stopping cube, the suppressed testing
/// average stays bounded, the off-diagonal average stays bounded, and the
/// mean stays nondegenerate. Also measures the pointwise domination of
/// `|T_phi good|` by `T_# b + M b + envelope`.
#[derive(Clone, Debug, Serialize)]
pub struct SuppressedTestReport {
    pub worst_testing: f64,
    pub worst_offdiag: f64,
    pub worst_nondeg: f64,
    pub sup_good_norm: f64,
    pub good_norm_bound: f64,
    pub pointwise_domination: f64,
    pub admissible_pairs: usize,
}

pub fn suppressed_testfn_verify<T: Real, const D: usize>(
    forest: &StoppingForest<T, D>,
    phi: &Arc<SuppressionProfile<T, D>>,
    kernel: &CZKernel<T, D>,
    level_cap: u32,
) -> Result<SuppressedTestReport> {
    let depth = forest.depth;
    let cap = level_cap.min(depth);
    let p = forest.size_exponent;
    let pe = T::lit(p);
    let op_phi = DiscreteOperator::suppressed(kernel, depth, phi);
    let members: Vec<DyadicCube<D>> = forest.nodes.keys().copied().collect();
    let family = SparseFamily::new(members, forest.tau_measured.max(1e-9), forest.eta)?;

    let mut worst_testing = 0.0f64;
    let mut worst_offdiag = 0.0f64;
    let mut worst_nondeg = f64::INFINITY;
    let mut sup_good = 0.0f64;
    let mut pointwise = 0.0f64;
    let mut pairs = 0usize;

    for (q, node) in &forest.nodes {
        let good = &node.decomposition.good;
        sup_good = sup_good.max(good.linf_norm().to_f64_lossy());
        let tphi_good = op_phi.apply(good)?;
        let sums_tp = CubeSums::new(&tphi_good.map(|v| v.abs().powf(pe)));
        let sums_good = CubeSums::new(good);

        // Pointwise domination on the node's own cube.
        let b = &node.decomposition.original;
        let cells = good.cube_cells(q);
        let tvals = maximal_truncation_on_cells(kernel, b, &cells);
        let maxfn = crate::dyadic::maximal_function(b, T::one())?;
        for (&i, &t) in cells.iter().zip(&tvals) {
            let den = t + maxfn.values()[i] + node.decomposition.envelope.values()[i];
            if den > T::zero() {
                pointwise = pointwise.max((tphi_good.values()[i].abs() / den).to_f64_lossy());
            }
        }

        for sub in q.descendants(cap) {
            if family.ancestor(&sub) != *q {
                continue;
            }
            pairs += 1;
            worst_testing =
                worst_testing.max(sums_tp.average(&sub).to_f64_lossy().powf(1.0 / p));
            worst_nondeg = worst_nondeg.min(sums_good.average(&sub).to_f64_lossy().abs());
            // Off-diagonal: |T_phi (1_{(3 sub)^c} good)| averaged over sub.
            let masked = good.masked(&crate::dyadic::Region::triple_complement_of(&sub));
            let cells = good.cube_cells(&sub);
            let avg = cells
                .iter()
                .map(|&i| op_phi.apply_at(&masked, &good.center_of_linear(i)).abs())
                .sum::<T>()
                .to_f64_lossy()
                / cells.len() as f64;
            worst_offdiag = worst_offdiag.max(avg);
        }
    }

    let good_norm_bound =
        (forest.cz_const_effective / forest.delta).powf(1.0 / p) * 2f64.powf(D as f64 / p);
    Ok(SuppressedTestReport {
        worst_testing,
        worst_offdiag,
        worst_nondeg,
        sup_good_norm: sup_good,
        good_norm_bound,
        pointwise_domination: pointwise,
        admissible_pairs: pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accretive::{make_indicator_system, make_rough_system};
    use crate::kernels::{make_kernel, KernelKind, KernelParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hilbert(depth: u32) -> CZKernel<f64, 1> {
        make_kernel(KernelKind::Hilbert, KernelParams::default(), depth).unwrap()
    }

    #[test]
    fn bounded_function_splits_nowhere() {
        let depth = 6;
        let root = DyadicCube::<1>::root();
        let b = GridFunction::<f64, 1>::constant(depth, 1.0);
        let dec = cz_decompose(&b, &root, 1.5, 8.0, 0.4).unwrap();
        assert!(dec.bad_cubes.is_empty());
        assert_eq!(dec.good, b);
        assert!(!dec.vacuous);
        assert!(dec.envelope.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_spike_on_a_child_is_its_own_good_part() {
        // b constant on the stopping cube: the bad part vanishes there.
        let depth = 5;
        let root = DyadicCube::<1>::root();
        let child = DyadicCube::<1>::new(1, [0]);
        let lam = 6.0;
        let b = GridFunction::<f64, 1>::indicator(depth, &child).scale(lam);
        let p = 2.0;
        // Threshold strictly between the root's density (lam^2/2) and the
        // child's (lam^2).
        let dec = cz_decompose(&b, &root, p, 0.75 * lam * lam, 0.4).unwrap();
        assert_eq!(dec.bad_cubes, vec![child]);
        let part = &dec.bad_parts[&child];
        assert!(part.values().iter().all(|&v| v == 0.0));
        assert_eq!(dec.good, b);
    }

    #[test]
    fn decomposition_identity_and_zero_means() {
        let depth = 7;
        let root = DyadicCube::<1>::root();
        let sys = make_rough_system::<f64, 1>(depth, 1.5, 6.0, 5, depth).unwrap();
        let b = sys.get(&root).unwrap();
        let dec = cz_decompose(b, &root, 1.5, 64.0, 0.4).unwrap();
        assert!(!dec.bad_cubes.is_empty(), "spike should trigger the split");
        let mut rec = dec.good.clone();
        for part in dec.bad_parts.values() {
            rec = rec.add(part);
        }
        for (a, bb) in rec.values().iter().zip(b.values()) {
            assert!((a - bb).abs() <= 1e-12 * (1.0 + bb.abs()));
        }
        for (q, part) in &dec.bad_parts {
            assert!(part.average(q).abs() < 1e-12);
        }
        assert!((dec.good.integral() - b.integral()).abs() < 1e-12);
        assert!(dec.good.linf_norm() <= dec.good_bound() + 1e-9);
        let (sum, bound) = dec.measure_certificate();
        assert!(sum <= bound + 1e-12);
    }

    #[test]
    fn maximal_cube_selection_matches_exhaustive_scan() {
        let depth = 6;
        let root = DyadicCube::<1>::root();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let b = GridFunction::<f64, 1>::from_fn(depth, |_| rng.gen_range(-4.0..4.0));
            let p = 1.5;
            let thr = 2.0;
            let dec = cz_decompose(&b, &root, p, thr, 0.4).unwrap();
            // Exhaustive reference: cubes meeting the threshold whose strict
            // ancestors all stay below it.
            let sums = CubeSums::new(&b.map(|v: f64| v.abs().powf(p)));
            let mut expected: Vec<DyadicCube<1>> = Vec::new();
            'outer: for q in DyadicCube::<1>::all(depth) {
                if sums.average(&q) < thr {
                    continue;
                }
                let mut a = q;
                while let Some(parent) = a.parent() {
                    if sums.average(&parent) >= thr {
                        continue 'outer;
                    }
                    a = parent;
                }
                expected.push(q);
            }
            expected.sort();
            assert_eq!(dec.bad_cubes, expected);
        }
    }

    #[test]
    fn envelope_norm_empty_and_single_cube() {
        let depth = 7;
        let root = DyadicCube::<1>::root();
        let flat = GridFunction::<f64, 1>::constant(depth, 1.0);
        let dec = cz_decompose(&flat, &root, 1.5, 100.0, 0.4).unwrap();
        let rep = error_envelope_norm(&dec, 1.0).unwrap();
        assert_eq!(rep.norm, 0.0);

        // Single bad cube: the L^1 mass of the envelope against |Q| is the
        // discretized tail integral, a modest constant.
        let child = DyadicCube::<1>::new(3, [3]);
        let spike = GridFunction::<f64, 1>::indicator(depth, &child).scale(64.0);
        let dec2 = cz_decompose(&spike, &root, 1.5, 300.0, 0.4).unwrap();
        assert_eq!(dec2.bad_cubes, vec![child]);
        let rep2 = error_envelope_norm(&dec2, 1.0).unwrap();
        let phi_mass_over_q = rep2.norm / child.volume::<f64>();
        assert!(phi_mass_over_q > 1.0 && phi_mass_over_q < 12.0, "{phi_mass_over_q}");
    }

    #[test]
    fn envelope_mass_scales_with_bad_cube_count() {
        // Doubling the number of disjoint bad cubes at fixed total measure
        // at most doubles the L^1 norm (the cubes are disjoint).
        let depth = 8;
        let root = DyadicCube::<1>::root();
        let one = vec![DyadicCube::<1>::new(4, [3])];
        let two = vec![DyadicCube::<1>::new(5, [6]), DyadicCube::<1>::new(5, [20])];
        let norm_of = |cubes: &[DyadicCube<1>]| {
            let dec = CZDecomposition {
                base: root,
                original: GridFunction::<f64, 1>::zeros(depth),
                good: GridFunction::zeros(depth),
                bad_cubes: cubes.to_vec(),
                bad_parts: BTreeMap::new(),
                envelope: GridFunction::zeros(depth),
                envelope_exponent: 1.4,
                threshold: 1.0,
                size_exponent: 1.5,
                vacuous: false,
                depth_truncated: false,
            };
            error_envelope_norm(&dec, 1.0).unwrap().norm
        };
        let n1 = norm_of(&one);
        let n2 = norm_of(&two);
        assert!(n2 <= 2.0 * n1 && n1 <= 2.0 * n2, "{n1} vs {n2}");
    }

    #[test]
    fn nothing_stops_for_tame_data() {
        let depth = 6;
        let root = DyadicCube::<1>::root();
        let kernel = hilbert(depth);
        let b = GridFunction::<f64, 1>::constant(depth, 1.0);
        let envelope = GridFunction::zeros(depth);
        let tsharp = GridFunction::zeros(depth);
        let maxfn = GridFunction::constant(depth, 1.0);
        let inputs = TbStoppingInputs {
            b: &b,
            good: &b,
            envelope: &envelope,
            tsharp_b: &tsharp,
            maxfn_b: &maxfn,
            kernel: &kernel,
        };
        let out =
            tb_stopping_cubes(&root, &inputs, 1.5, 0.03, 1.0, 0.0, 0.5, false, 1.0).unwrap();
        assert!(out.cubes.is_empty());
        assert_eq!(out.tau_measured, 1.0);
        assert!(out.tau_chain > 0.0);
    }

    #[test]
    fn degenerate_cutoff_misuse_is_caught() {
        let depth = 5;
        let root = DyadicCube::<1>::root();
        let kernel = hilbert(depth);
        let b = GridFunction::<f64, 1>::constant(depth, 1.0);
        let envelope = GridFunction::zeros(depth);
        let tsharp = GridFunction::zeros(depth);
        let maxfn = GridFunction::constant(depth, 1.0);
        let inputs = TbStoppingInputs {
            b: &b,
            good: &b,
            envelope: &envelope,
            tsharp_b: &tsharp,
            maxfn_b: &maxfn,
            kernel: &kernel,
        };
        // eta = 1 is rejected outright: every cube would fire.
        assert!(
            tb_stopping_cubes(&root, &inputs, 1.5, 0.25, 1.0, 0.0, 1.0, false, 1.0).is_err()
        );
        // A mean below the cutoff fires at the base: no sparseness margin.
        let low_mean = GridFunction::<f64, 1>::constant(depth, 0.3);
        let inputs2 = TbStoppingInputs {
            b: &low_mean,
            good: &low_mean,
            envelope: &envelope,
            tsharp_b: &tsharp,
            maxfn_b: &maxfn,
            kernel: &kernel,
        };
        assert!(matches!(
            tb_stopping_cubes(&root, &inputs2, 1.5, 0.25, 1.0, 0.0, 0.5, false, 1.0),
            Err(Error::NoSparsenessMargin { .. })
        ));
    }

    #[test]
    fn offdiag_report_chebyshev_bound_holds() {
        let depth = 7;
        let sys = make_rough_system::<f64, 1>(depth, 1.5, 4.0, 3, depth).unwrap();
        let kernel = hilbert(depth);
        let op = DiscreteOperator::new(kernel, depth);
        let root = DyadicCube::<1>::root();
        for lambda in [10.0, 100.0, 1000.0] {
            let rep = offdiag_verify(&sys, &op, &root, lambda, depth).unwrap();
            assert!(
                rep.violator_measure <= rep.violator_bound + 1e-12,
                "lambda {lambda}: {rep:?}"
            );
            assert!(rep.worst_average.is_finite());
        }
        let rep = offdiag_verify(&sys, &op, &root, 1e9, depth).unwrap();
        assert_eq!(rep.ample_fraction, 1.0);
    }

    #[test]
    fn indicator_forest_is_trivial() {
        let depth = 6;
        let sys = make_indicator_system::<f64, 1>(depth);
        let kernel = hilbert(depth);
        let root = DyadicCube::<1>::root();
        let forest = iterate_forest(&sys, &kernel, &root, &StoppingParams::default()).unwrap();
        assert_eq!(forest.nodes.len(), 1);
        assert!(forest.all_bad_cubes().is_empty());
        assert_eq!(forest.tau_measured, 1.0);
        let phi = merged_profile(&[&forest], 1).unwrap();
        assert!(phi.is_zero());
        assert_eq!(phi.positive_measure(), 0.0);
    }

    #[test]
    fn rough_forest_certificates_hold() {
        let depth = 8;
        let sys = make_rough_system::<f64, 1>(depth, 1.5, 6.0, 7, depth).unwrap();
        let kernel = hilbert(depth);
        let root = DyadicCube::<1>::root();
        let forest = iterate_forest(&sys, &kernel, &root, &StoppingParams::default()).unwrap();
        assert!(!forest.all_bad_cubes().is_empty(), "rough spikes should trigger splits");
        let report = forest.report();
        assert!(report.generations_certified, "{report:?}");
        assert!(forest.tau_measured > 0.0);
        assert!(forest.total_bad_measure() <= report.total_bad_bound + 1e-12);

        // Induced profile: support bounded by the tripled bad measure,
        // exactly on the grid, and by the certified fraction.
        let phi = merged_profile(&[&forest], 1).unwrap();
        let support = phi.positive_measure();
        assert!(support <= 3.0 * forest.total_bad_measure() + 1e-12);
        assert!(support <= 3.0 * forest.delta / forest.tau_measured + 1e-12);

        // Profile dominates every single-cube lower profile at cell centers.
        let inner = phi.inner_grid();
        for q in forest.all_bad_cubes() {
            let t = q.triple::<f64>();
            for i in 0..inner.len() {
                let x = inner.center_of_linear(i);
                assert!(inner.values()[i] >= t.dist_to_complement(&x) - 1e-12);
            }
        }

        // Discrete Lipschitz bound of the profile.
        let h = 0.5f64.powi(depth as i32);
        for i in 0..inner.len() - 1 {
            assert!((inner.values()[i + 1] - inner.values()[i]).abs() <= h + 1e-12);
        }
    }

    #[test]
    fn forest_members_form_a_sparse_system_with_bounded_good_parts() {
        let depth = 8;
        let sys = make_rough_system::<f64, 1>(depth, 1.5, 6.0, 7, depth).unwrap();
        let kernel = hilbert(depth);
        let root = DyadicCube::<1>::root();
        let forest = iterate_forest(&sys, &kernel, &root, &StoppingParams::default()).unwrap();
        let sparse = forest_to_sparse_system(&forest).unwrap();
        let fam = sparse.sparse_family().unwrap();
        assert!(fam.c0 > forest.eta, "admissible means exceed the cutoff: {}", fam.c0);
        fam.verify_sparseness().unwrap();

        let phi = merged_profile(&[&forest], 1).unwrap();
        let rep = suppressed_testfn_verify(&forest, &phi, &kernel, depth).unwrap();
        assert!(rep.worst_nondeg > forest.eta);
        assert!(rep.sup_good_norm <= rep.good_norm_bound + 1e-9, "{rep:?}");
        assert!(rep.worst_testing.is_finite() && rep.worst_offdiag.is_finite());
    }

    #[test]
    fn trivial_profile_reduces_suppressed_verifier_to_plain_testing() {
        let depth = 6;
        let sys = make_indicator_system::<f64, 1>(depth);
        let kernel = hilbert(depth);
        let root = DyadicCube::<1>::root();
        let forest = iterate_forest(&sys, &kernel, &root, &StoppingParams::default()).unwrap();
        let phi = merged_profile(&[&forest], 1).unwrap();
        assert!(phi.is_zero());
        let rep = suppressed_testfn_verify(&forest, &phi, &kernel, depth).unwrap();
        // With a vanishing profile the good part is the original indicator
        // and the verifier reduces to the plain validation quantities.
        assert!((rep.worst_nondeg - 1.0).abs() < 1e-12);
        assert!((rep.sup_good_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_system_merge_doubles_the_support_budget() {
        let depth = 7;
        let sys1 = make_rough_system::<f64, 1>(depth, 1.5, 6.0, 7, depth).unwrap();
        let sys2 = make_rough_system::<f64, 1>(depth, 1.5, 6.0, 8, depth).unwrap();
        let kernel = hilbert(depth);
        let root = DyadicCube::<1>::root();
        let f1 = iterate_forest(&sys1, &kernel, &root, &StoppingParams::default()).unwrap();
        let f2 =
            iterate_forest(&sys2, &kernel.transpose(), &root, &StoppingParams::default()).unwrap();
        let phi = merged_profile(&[&f1, &f2], 1).unwrap();
        let tau = f1.tau_measured.min(f2.tau_measured);
        let budget = 2.0 * 3.0 * (f1.delta / tau);
        assert!(phi.positive_measure() <= budget + 1e-12);
    }
}
