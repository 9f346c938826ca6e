//! Calderon-Zygmund kernels with declared size and smoothness constants,
//! the nonnegative Lipschitz suppression profile, and the suppressed kernel
//!
//! ```text
//! K_phi(x,y) = |x-y|^(2m) K(x,y) / ( |x-y|^(2m) + phi(x)^m phi(y)^m ).
//! ```
//!
//! Kernels carry a qualitative cap `K := K * 1_{|x-y| > eta0}` with `eta0`
//! half the finest cell side; evaluations between distinct cell centers
//! never reach the cap, so measured constants are cap-independent.

use crate::dyadic::{DyadicCube, GridFunction, MultiIndexIter};
use crate::error::{Error, Result};
use crate::scalar::{dist, dist2, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

type EvalFn<T, const D: usize> = Arc<dyn Fn(&[T; D], &[T; D]) -> T + Send + Sync>;

/// A kernel `K(x,y)` defined off the diagonal, with declared constants for
/// the size bound `|x-y|^D |K| <= size_const` and the Holder bounds of
/// exponent `alpha` under perturbations `|x-x'| + |y-y'| < |x-y|/2`.
#[derive(Clone)]
pub struct CZKernel<T, const D: usize> {
    eval_fn: EvalFn<T, D>,
    pub name: String,
    pub alpha: T,
    pub size_const: T,
    pub holder_const: T,
    pub antisymmetric: bool,
    /// Qualitative cap radius; `eval` returns zero within it.
    pub cap_radius: T,
}

impl<T: Real, const D: usize> CZKernel<T, D> {
    pub fn eval(&self, x: &[T; D], y: &[T; D]) -> T {
        if dist2(x, y) <= self.cap_radius * self.cap_radius {
            return T::zero();
        }
        (self.eval_fn)(x, y)
    }

    /// Kernel of the adjoint operator, `K*(x,y) = K(y,x)`.
    pub fn transpose(&self) -> Self {
        let base = self.eval_fn.clone();
        CZKernel {
            eval_fn: Arc::new(move |x: &[T; D], y: &[T; D]| base(y, x)),
            name: format!("{}^*", self.name),
            alpha: self.alpha,
            size_const: self.size_const,
            holder_const: self.holder_const,
            antisymmetric: self.antisymmetric,
            cap_radius: self.cap_radius,
        }
    }
}

/// Concrete kernel families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `1/(x-y)` on the line. Antisymmetric.
    Hilbert,
    /// `(x_j - y_j)/|x-y|^3` in the plane, `j` in `{1,2}`. Antisymmetric.
    Riesz1,
    Riesz2,
    /// Real part of `1/((x-y) + i(A(x)-A(y)))` for a Lipschitz graph `A`.
    CauchyRe,
    /// Imaginary part of the same kernel; both parts are antisymmetric.
    CauchyIm,
    /// The zero kernel, for degenerate-path tests.
    Zero,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct KernelParams {
    /// Declared Holder exponent. Kept below 1/2: lowering the exponent only
    /// weakens the smoothness hypothesis, and the coefficient-decay analysis
    /// assumes the sub-1/2 regime.
    pub alpha: f64,
    /// Lipschitz constant of the graph for the Cauchy kernels.
    pub lipschitz: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams { alpha: 0.4, lipschitz: 0.5 }
    }
}

/// Build a kernel instance. `depth` fixes the qualitative cap radius at half
/// the finest cell side.
pub fn make_kernel<T: Real, const D: usize>(
    kind: KernelKind,
    params: KernelParams,
    depth: u32,
) -> Result<CZKernel<T, D>> {
    if !(params.alpha > 0.0 && params.alpha < 0.5) {
        return Err(Error::ExponentRange {
            context: format!("kernel alpha = {} must lie in (0, 1/2)", params.alpha),
        });
    }
    let need_dim = match kind {
        KernelKind::Hilbert | KernelKind::CauchyRe | KernelKind::CauchyIm => Some(1),
        KernelKind::Riesz1 | KernelKind::Riesz2 => Some(2),
        KernelKind::Zero => None,
    };
    if let Some(d) = need_dim {
        if d != D {
            return Err(Error::DimensionMismatch {
                context: format!("kernel {kind:?} requires dimension {d}, got {D}"),
            });
        }
    }
    let cap_radius = T::lit(0.5f64.powi(depth as i32 + 1));
    let alpha = T::lit(params.alpha);
    let lip = T::lit(params.lipschitz);

    let (eval_fn, name, size_const, holder_const, antisymmetric): (
        EvalFn<T, D>,
        &str,
        f64,
        f64,
        bool,
    ) = match kind {
        KernelKind::Hilbert => (
            Arc::new(|x: &[T; D], y: &[T; D]| T::one() / (x[0] - y[0])),
            "hilbert",
            1.0,
            2.0,
            true,
        ),
        KernelKind::Riesz1 | KernelKind::Riesz2 => {
            let j = if kind == KernelKind::Riesz1 { 0 } else { 1 };
            (
                Arc::new(move |x: &[T; D], y: &[T; D]| {
                    let r2 = dist2(x, y);
                    (x[j] - y[j]) / (r2 * r2.sqrt())
                }),
                if j == 0 { "riesz1" } else { "riesz2" },
                1.0,
                16.0,
                true,
            )
        }
        KernelKind::CauchyRe => (
            Arc::new(move |x: &[T; D], y: &[T; D]| {
                let dx = x[0] - y[0];
                let da = lipschitz_graph(lip, x[0]) - lipschitz_graph(lip, y[0]);
                dx / (dx * dx + da * da)
            }),
            "cauchy_re",
            1.0,
            32.0,
            true,
        ),
        KernelKind::CauchyIm => (
            Arc::new(move |x: &[T; D], y: &[T; D]| {
                let dx = x[0] - y[0];
                let da = lipschitz_graph(lip, x[0]) - lipschitz_graph(lip, y[0]);
                -da / (dx * dx + da * da)
            }),
            "cauchy_im",
            1.0,
            32.0,
            true,
        ),
        KernelKind::Zero => {
            (Arc::new(|_: &[T; D], _: &[T; D]| T::zero()), "zero", 0.0, 0.0, true)
        }
    };

    Ok(CZKernel {
        eval_fn,
        name: name.to_string(),
        alpha,
        size_const: T::lit(size_const),
        holder_const: T::lit(holder_const),
        antisymmetric,
        cap_radius,
    })
}

/// The graph function for the Cauchy kernels: a tent with slope `lip`.
fn lipschitz_graph<T: Real>(lip: T, x: T) -> T {
    lip * (x - T::lit(0.5)).abs()
}

/// Nonnegative 1-Lipschitz suppression profile. Profiles built from bad
/// cubes evaluate the exact distance formula everywhere; profiles wrapped
/// around an arbitrary grid are piecewise constant on the padded lattice
/// (value of the cell containing the query point).
#[derive(Clone)]
pub struct SuppressionProfile<T, const D: usize> {
    depth: u32,
    /// Values at padded cell centers, row-major over `3*2^depth` per side.
    padded: Vec<T>,
    /// Bad cubes the profile was built from, when applicable.
    cubes: Vec<DyadicCube<D>>,
    /// Triples of the bad cubes, cached for evaluation.
    triples: Vec<crate::dyadic::GeomBox<T, D>>,
    from_cubes: bool,
    pub m: u32,
    pub lipschitz: T,
}

impl<T: Real, const D: usize> SuppressionProfile<T, D> {
    pub fn zero(depth: u32, m: u32) -> Result<Self> {
        Self::from_cubes(depth, m, Vec::new())
    }

    /// `phi(x) = sup over bad cubes Q of dist(x, (3Q)^c)`, evaluated exactly
    /// (zero when there are no cubes). Dominates every single-cube lower
    /// profile by construction, and each term is 1-Lipschitz, so the sup is
    /// too.
    pub fn from_cubes(depth: u32, m: u32, cubes: Vec<DyadicCube<D>>) -> Result<Self> {
        check_suppression_power::<D>(m)?;
        let pm = 3 * (1usize << depth);
        let triples: Vec<_> = cubes.iter().map(|q| q.triple::<T>()).collect();
        let mut padded = Vec::with_capacity(pm.pow(D as u32));
        for idx in MultiIndexIter::new([pm; D]) {
            let x = crate::dyadic::padded_center::<T, D>(depth, &idx);
            let mut v = T::zero();
            for t in &triples {
                v = v.max(t.dist_to_complement(&x));
            }
            padded.push(v);
        }
        Ok(SuppressionProfile {
            depth,
            padded,
            cubes,
            triples,
            from_cubes: true,
            m,
            lipschitz: T::one(),
        })
    }

    /// Wrap an arbitrary nonnegative grid as a profile. The grid is extended
    /// to the padded lattice by coordinate clamping, which preserves the
    /// discrete Lipschitz bound. Validates nonnegativity and the per-cell
    /// Lipschitz condition against the declared constant.
    pub fn from_grid(values: &GridFunction<T, D>, m: u32, lipschitz: T) -> Result<Self> {
        check_suppression_power::<D>(m)?;
        if lipschitz > T::one() {
            return Err(Error::InvalidProfile {
                context: format!("declared Lipschitz constant {lipschitz} exceeds 1"),
            });
        }
        if values.values().iter().any(|v| *v < T::zero()) {
            return Err(Error::InvalidProfile { context: "negative profile value".into() });
        }
        let depth = values.depth();
        let im = 1usize << depth;
        let h = T::lit(0.5f64.powi(depth as i32));
        let slack = T::lit(1e-9);
        // Adjacent-cell Lipschitz check at cell-center resolution.
        for idx in MultiIndexIter::new([im; D]) {
            for axis in 0..D {
                if idx[axis] + 1 < im {
                    let mut jdx = idx;
                    jdx[axis] += 1;
                    let a = values.values()[values.linear_index(&idx)];
                    let b = values.values()[values.linear_index(&jdx)];
                    if (a - b).abs() > lipschitz * h * (T::one() + slack) {
                        return Err(Error::InvalidProfile {
                            context: format!(
                                "Lipschitz violation between adjacent cells: |{a} - {b}| > {lipschitz} * {h}"
                            ),
                        });
                    }
                }
            }
        }
        let pm = 3 * im;
        let mut padded = Vec::with_capacity(pm.pow(D as u32));
        for idx in MultiIndexIter::new([pm; D]) {
            let mut clamped = [0usize; D];
            for i in 0..D {
                clamped[i] = idx[i].saturating_sub(im).min(im - 1);
            }
            padded.push(values.values()[values.linear_index(&clamped)]);
        }
        Ok(SuppressionProfile {
            depth,
            padded,
            cubes: Vec::new(),
            triples: Vec::new(),
            from_cubes: false,
            m,
            lipschitz,
        })
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn bad_cubes(&self) -> &[DyadicCube<D>] {
        &self.cubes
    }

    /// Exact distance-sup for cube-built profiles; otherwise the value of
    /// the padded cell containing `x` (clamped into the padded box).
    pub fn eval(&self, x: &[T; D]) -> T {
        if self.from_cubes {
            let mut v = T::zero();
            for t in &self.triples {
                v = v.max(t.dist_to_complement(x));
            }
            return v;
        }
        let pm = 3 * (1usize << self.depth);
        let h = T::lit(0.5f64.powi(self.depth as i32));
        let mut lin = 0usize;
        for i in 0..D {
            let t = ((x[i] + T::one()) / h).floor().to_f64_lossy();
            let c = (t as i64).clamp(0, pm as i64 - 1) as usize;
            lin = lin * pm + c;
        }
        self.padded[lin]
    }

    /// Snapshot over the reference cube as a grid function.
    pub fn inner_grid(&self) -> GridFunction<T, D> {
        let im = 1usize << self.depth;
        let pm = 3 * im;
        let mut values = Vec::with_capacity(im.pow(D as u32));
        for idx in MultiIndexIter::new([im; D]) {
            let mut lin = 0usize;
            for i in 0..D {
                lin = lin * pm + idx[i] + im;
            }
            values.push(self.padded[lin]);
        }
        GridFunction::from_values(self.depth, values).expect("snapshot size")
    }

    pub fn is_zero(&self) -> bool {
        self.padded.iter().all(|v| *v == T::zero())
    }

    /// Measure of `{phi > 0}` inside the reference cube, exact on the grid.
    pub fn positive_measure(&self) -> T {
        let g = self.inner_grid();
        let n = g.values().iter().filter(|v| **v > T::zero()).count();
        T::from_count(n) * g.cell_volume()
    }
}

fn check_suppression_power<const D: usize>(m: u32) -> Result<()> {
    if 2 * m < D as u32 {
        return Err(Error::InvalidProfile {
            context: format!("suppression power m = {m} must satisfy m >= {D}/2"),
        });
    }
    Ok(())
}

/// The suppressed kernel. Pointwise `|K_phi| <= |K|`; exactly `K` where
/// either profile value vanishes; antisymmetry survives because the damping
/// factor is symmetric in `x` and `y`.
pub fn suppress<T: Real, const D: usize>(
    k: &CZKernel<T, D>,
    phi: &Arc<SuppressionProfile<T, D>>,
) -> CZKernel<T, D> {
    let base = k.clone();
    let phi = phi.clone();
    let m = phi.m as i32;
    CZKernel {
        name: format!("{}+suppressed", k.name),
        alpha: k.alpha,
        size_const: k.size_const,
        holder_const: k.holder_const,
        antisymmetric: k.antisymmetric,
        cap_radius: k.cap_radius,
        eval_fn: Arc::new(move |x: &[T; D], y: &[T; D]| {
            let kv = base.eval(x, y);
            let px = phi.eval(x);
            let py = phi.eval(y);
            if px == T::zero() || py == T::zero() {
                // Agreement with K is exact here, not merely approximate.
                return kv;
            }
            let r2m = dist2(x, y).powi(m);
            r2m * kv / (r2m + (px * py).powi(m))
        }),
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CzEstimateReport {
    pub max_size_ratio: f64,
    pub max_holder_x_ratio: f64,
    pub max_holder_y_ratio: f64,
    /// `max |K(x,y) + K(y,x)|` over the sample, normalized by `max |K|`.
    pub antisymmetry_defect: f64,
    pub samples: usize,
}

/// Samples admissible quadruples `(x, x', y, y')` with
/// `|x-x'| + |y-y'| < |x-y|/2` and reports the worst normalized size and
/// Holder quotients. Sampling keeps `|x-y|` at least four cap radii so the
/// qualitative cap never contaminates the quotients.
pub fn verify_cz_estimates<T: Real, const D: usize>(
    k: &CZKernel<T, D>,
    samples: usize,
    seed: u64,
) -> Result<CzEstimateReport> {
    if samples == 0 {
        return Err(Error::config("verify_cz_estimates needs samples > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = k.alpha.to_f64_lossy();
    let min_gap = 4.0 * k.cap_radius.to_f64_lossy();

    let mut max_size: f64 = 0.0;
    let mut max_hx: f64 = 0.0;
    let mut max_hy: f64 = 0.0;
    let mut max_anti: f64 = 0.0;
    let mut max_abs: f64 = 0.0;

    let mut drawn = 0usize;
    while drawn < samples {
        let x: [f64; D] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let y: [f64; D] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let r = {
            let mut s = 0.0;
            for i in 0..D {
                s += (x[i] - y[i]) * (x[i] - y[i]);
            }
            s.sqrt()
        };
        if r < min_gap {
            continue;
        }
        drawn += 1;

        let budget = 0.499 * r;
        let tx = rng.gen_range(0.0..budget);
        let ty = rng.gen_range(0.0..(budget - tx));
        let xp = perturb(&mut rng, &x, tx);
        let yp = perturb(&mut rng, &y, ty);

        let xt: [T; D] = std::array::from_fn(|i| T::lit(x[i]));
        let yt: [T; D] = std::array::from_fn(|i| T::lit(y[i]));
        let xpt: [T; D] = std::array::from_fn(|i| T::lit(xp[i]));
        let ypt: [T; D] = std::array::from_fn(|i| T::lit(yp[i]));

        let kxy = k.eval(&xt, &yt).to_f64_lossy();
        max_abs = max_abs.max(kxy.abs());
        max_size = max_size.max(r.powi(D as i32) * kxy.abs());
        max_anti = max_anti.max((kxy + k.eval(&yt, &xt).to_f64_lossy()).abs());

        if tx > 0.0 {
            let kxpy = k.eval(&xpt, &yt).to_f64_lossy();
            let dx = dist(&xt, &xpt).to_f64_lossy();
            if dx > 0.0 {
                max_hx = max_hx.max(r.powf(D as f64 + alpha) * (kxy - kxpy).abs() / dx.powf(alpha));
            }
        }
        if ty > 0.0 {
            let kxyp = k.eval(&xt, &ypt).to_f64_lossy();
            let dy = dist(&yt, &ypt).to_f64_lossy();
            if dy > 0.0 {
                max_hy = max_hy.max(r.powf(D as f64 + alpha) * (kxy - kxyp).abs() / dy.powf(alpha));
            }
        }
    }

    Ok(CzEstimateReport {
        max_size_ratio: max_size,
        max_holder_x_ratio: max_hx,
        max_holder_y_ratio: max_hy,
        antisymmetry_defect: if max_abs > 0.0 { max_anti / max_abs } else { 0.0 },
        samples,
    })
}

fn perturb<const D: usize>(rng: &mut ChaCha8Rng, x: &[f64; D], radius: f64) -> [f64; D] {
    let dir: [f64; D] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
    std::array::from_fn(|i| x[i] + radius * dir[i] / norm)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SuppressedBoundReport {
    /// `max |K_phi(x,y)| * side(Q)^D` over sampled pairs in `Q`.
    pub max_normalized: f64,
    pub suppression_power: u32,
}

/// Inside a bad cube `Q` (where the profile dominates the distance to
/// `(3Q)^c`), the suppressed kernel is bounded by a constant over `|Q|`,
/// even across the diagonal. Samples pairs in `Q` and reports the worst
/// normalized value, for each requested suppression power.
pub fn suppressed_bound_check<T: Real, const D: usize>(
    k: &CZKernel<T, D>,
    cube: &DyadicCube<D>,
    powers: &[u32],
    samples: usize,
    seed: u64,
) -> Result<Vec<SuppressedBoundReport>> {
    let depth = {
        // Recover the grid depth from the cap radius the kernel was built with.
        let cap = k.cap_radius.to_f64_lossy();
        (-(2.0 * cap).log2()).round() as u32
    };
    let mut out = Vec::new();
    for &m in powers {
        let phi = Arc::new(SuppressionProfile::<T, D>::from_cubes(depth, m, vec![*cube])?);
        let kphi = suppress(k, &phi);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = cube.side::<T>().to_f64_lossy();
        let lo = cube.lower::<T>();
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let x: [T; D] =
                std::array::from_fn(|i| lo[i] + T::lit(rng.gen_range(0.0..1.0)) * cube.side());
            let y: [T; D] =
                std::array::from_fn(|i| lo[i] + T::lit(rng.gen_range(0.0..1.0)) * cube.side());
            let v = kphi.eval(&x, &y).to_f64_lossy().abs();
            worst = worst.max(v * side.powi(D as i32));
        }
        out.push(SuppressedBoundReport { max_normalized: worst, suppression_power: m });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::GridFunction;

    fn hilbert(depth: u32) -> CZKernel<f64, 1> {
        make_kernel(KernelKind::Hilbert, KernelParams::default(), depth).unwrap()
    }

    #[test]
    fn hilbert_point_values() {
        let k = hilbert(8);
        assert_eq!(k.eval(&[0.75], &[0.25]), 2.0);
        assert_eq!(k.eval(&[0.25], &[0.75]), -2.0);
    }

    #[test]
    fn hilbert_antisymmetry_and_unit_size() {
        let k = hilbert(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: [f64; 1] = [rng.gen_range(0.0..1.0)];
            let y: [f64; 1] = [rng.gen_range(0.0..1.0)];
            if (x[0] - y[0]).abs() < 0.01 {
                continue;
            }
            assert_eq!(k.eval(&y, &x), -k.eval(&x, &y));
            let r = (x[0] - y[0]).abs();
            assert!((r * k.eval(&x, &y).abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn riesz_kernels_are_antisymmetric_and_size_bounded() {
        let k = make_kernel::<f64, 2>(KernelKind::Riesz1, KernelParams::default(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x: [f64; 2] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let y: [f64; 2] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let r2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
            if r2.sqrt() < 0.05 {
                continue;
            }
            assert_eq!(k.eval(&y, &x), -k.eval(&x, &y));
            assert!(r2 * k.eval(&x, &y).abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn kernel_dimension_is_enforced() {
        assert!(make_kernel::<f64, 2>(KernelKind::Hilbert, KernelParams::default(), 5).is_err());
        assert!(make_kernel::<f64, 1>(KernelKind::Riesz1, KernelParams::default(), 5).is_err());
    }

    #[test]
    fn cz_estimates_within_declared_constants() {
        for (kind, depth) in [(KernelKind::Hilbert, 8), (KernelKind::CauchyRe, 8)] {
            let k = make_kernel::<f64, 1>(kind, KernelParams::default(), depth).unwrap();
            let r = verify_cz_estimates(&k, 4000, 11).unwrap();
            assert!(r.max_size_ratio <= k.size_const + 1e-9, "{kind:?}: {r:?}");
            assert!(r.max_holder_x_ratio <= k.holder_const, "{kind:?}: {r:?}");
            assert!(r.max_holder_y_ratio <= k.holder_const, "{kind:?}: {r:?}");
            assert!(r.antisymmetry_defect < 1e-12);
        }
        let k = make_kernel::<f64, 2>(KernelKind::Riesz1, KernelParams::default(), 5).unwrap();
        let r = verify_cz_estimates(&k, 4000, 12).unwrap();
        assert!(r.max_size_ratio <= 1.0 + 1e-9);
        assert!(r.max_holder_x_ratio <= k.holder_const);
    }

    #[test]
    fn hilbert_size_ratio_is_exactly_one_under_dense_sampling() {
        let k = hilbert(10);
        let r = verify_cz_estimates(&k, 20000, 3).unwrap();
        assert!((r.max_size_ratio - 1.0).abs() < 1e-10);
    }

    #[test]
    fn trivial_holder_quotients_vanish() {
        // x' = x and y' = y contribute nothing; a sample of size one with no
        // perturbation budget exercises the zero path.
        let k = hilbert(6);
        let x = [0.9];
        let y = [0.1];
        assert_eq!(k.eval(&x, &y), k.eval(&x, &y));
        let ratio = (k.eval(&x, &y) - k.eval(&x, &y)).abs();
        assert_eq!(ratio, 0.0);
    }

    #[test]
    fn zero_profile_leaves_kernel_exactly_unchanged() {
        let k = hilbert(6);
        let phi = Arc::new(SuppressionProfile::<f64, 1>::zero(6, 1).unwrap());
        let ks = suppress(&k, &phi);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x = [rng.gen_range(0.0..1.0)];
            let y = [rng.gen_range(0.0..1.0)];
            assert_eq!(ks.eval(&x, &y), k.eval(&x, &y));
        }
    }

    #[test]
    fn suppression_shrinks_and_preserves_antisymmetry() {
        let k = hilbert(6);
        let bad = DyadicCube::<1>::new(2, [1]);
        let phi = Arc::new(SuppressionProfile::from_cubes(6, 1, vec![bad]).unwrap());
        let ks = suppress(&k, &phi);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let x = [rng.gen_range(0.0..1.0)];
            let y = [rng.gen_range(0.0..1.0)];
            assert!(ks.eval(&x, &y).abs() <= k.eval(&x, &y).abs() + 1e-15);
            assert_eq!(ks.eval(&y, &x), -ks.eval(&x, &y));
            // Size estimate survives suppression.
            let r = (x[0] - y[0]).abs();
            assert!(r * ks.eval(&x, &y).abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn pointwise_larger_profile_suppresses_harder() {
        let k = hilbert(6);
        let small = Arc::new(
            SuppressionProfile::from_cubes(6, 1, vec![DyadicCube::<1>::new(3, [2])]).unwrap(),
        );
        let big = Arc::new(
            SuppressionProfile::from_cubes(
                6,
                1,
                vec![DyadicCube::<1>::new(3, [2]), DyadicCube::<1>::new(2, [1])],
            )
            .unwrap(),
        );
        let k_small = suppress(&k, &small);
        let k_big = suppress(&k, &big);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..300 {
            let x = [rng.gen_range(0.0..1.0)];
            let y = [rng.gen_range(0.0..1.0)];
            assert!(k_big.eval(&x, &y).abs() <= k_small.eval(&x, &y).abs() + 1e-15);
        }
    }

    #[test]
    fn single_bad_cube_profile_geometry() {
        let q = DyadicCube::<1>::new(3, [4]);
        let phi = SuppressionProfile::<f64, 1>::from_cubes(6, 1, vec![q]).unwrap();
        // At the center of Q the distance to (3Q)^c is 1.5 * side(Q).
        let c = q.center::<f64>();
        assert!((phi.eval(&c) - 1.5 * q.side::<f64>()).abs() < 1e-12);
        // Support of phi is exactly 3Q, measured on the grid inside [0,1).
        assert!((phi.positive_measure() - 3.0 * q.side::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn grid_profile_validation() {
        let ok = GridFunction::<f64, 1>::from_fn(5, |x| 0.25 * (x[0] - 0.5).abs());
        assert!(SuppressionProfile::from_grid(&ok, 1, 1.0).is_ok());

        let negative = GridFunction::<f64, 1>::constant(5, -0.1);
        assert!(SuppressionProfile::from_grid(&negative, 1, 1.0).is_err());

        let steep = GridFunction::<f64, 1>::from_fn(5, |x| if x[0] < 0.5 { 0.0 } else { 1.0 });
        assert!(SuppressionProfile::from_grid(&steep, 1, 1.0).is_err());

        assert!(SuppressionProfile::<f64, 2>::zero(3, 0).is_err());
    }

    #[test]
    fn suppressed_kernel_bounded_inside_bad_cube() {
        let k = hilbert(8);
        let q = DyadicCube::<1>::new(2, [1]);
        let reports = suppressed_bound_check(&k, &q, &[1, 2], 2000, 9).unwrap();
        for r in &reports {
            // Normalized bound C with |K_phi| <= C / side(Q); dimensional
            // constant for the interval is modest.
            assert!(r.max_normalized <= 4.0, "{r:?}");
        }
    }
}
