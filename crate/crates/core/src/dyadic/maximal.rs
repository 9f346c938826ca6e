//! The `L^p`-mean maximal operator over dyadic cubes and their third-shifted
//! translates, and the Hardy-inequality verifier on `3Q \ Q`.

use super::cube::{DyadicCube, MultiIndexIter};
use super::grid::{cells_per_side, GridFunction};
use crate::error::{Error, Result};
use crate::scalar::{dist, Real};
use rayon::prelude::*;

/// `M_p f(x) = sup (avg_B |f|^p)^{1/p}` over boxes `B` containing `x`, where
/// the boxes are the dyadic cubes of every level together with their
/// `3^D - 1` third-shifted translates per level. `f` is extended by zero
/// outside the reference cube. The dyadic-only supremum underestimates the
/// ball supremum; the shifted grids recover it up to a dimensional factor,
/// because any ball sits inside a shifted box of comparable size.
pub fn maximal_function<T: Real, const D: usize>(
    f: &GridFunction<T, D>,
    exponent: T,
) -> Result<GridFunction<T, D>> {
    if exponent < T::one() {
        return Err(Error::ExponentRange {
            context: format!("maximal function exponent {exponent} < 1"),
        });
    }
    let depth = f.depth();
    let m = cells_per_side(depth) as i64;
    let prefix = PaddedPrefix::<T, D>::from_inner(f, exponent);

    let inner_cells: Vec<[usize; D]> = MultiIndexIter::new([m as usize; D]).collect();
    let values: Vec<T> = inner_cells
        .par_iter()
        .map(|idx| {
            let mut best = T::zero();
            for k in 0..=depth {
                let cells_per_box = 1i64 << (depth - k);
                for shift in MultiIndexIter::new([3usize; D]) {
                    let mut lo = [0i64; D];
                    for i in 0..D {
                        let c = idx[i] as i64;
                        let t = shift[i] as i64 * cells_per_box;
                        // Box index along axis i, in exact 1/(6*2^(depth-k))
                        // units of the cell side: center 3*(2c+1), shift 2t.
                        let num = 3 * (2 * c + 1) - 2 * t;
                        let j = num.div_euclid(6 * cells_per_box);
                        // First padded cell whose center lies in the box.
                        let w = (3 * j * cells_per_box) + t;
                        lo[i] = (2 * w + 6 * m - 3 + 5).div_euclid(6);
                    }
                    let total = prefix.rect_sum(&lo, cells_per_box);
                    let count = T::from_count((cells_per_box as usize).pow(D as u32));
                    best = best.max(total / count);
                }
            }
            best.powf(T::one() / exponent)
        })
        .collect();

    GridFunction::from_values(depth, values)
}

/// Prefix sums of `|f|^p` on the padded lattice (zero outside the reference
/// cube). Supports rectangular sums of power-of-two extent.
struct PaddedPrefix<T, const D: usize> {
    pm: usize,
    data: Vec<T>,
}

impl<T: Real, const D: usize> PaddedPrefix<T, D> {
    fn from_inner(f: &GridFunction<T, D>, exponent: T) -> Self {
        let m = cells_per_side(f.depth());
        let pm = 3 * m;
        let mut raw = vec![T::zero(); pm.pow(D as u32)];
        for (lin, idx) in MultiIndexIter::new([m; D]).enumerate() {
            let mut plin = 0usize;
            for i in 0..D {
                plin = plin * pm + idx[i] + m;
            }
            raw[plin] = f.values()[lin].abs().powf(exponent);
        }
        let data = match D {
            1 => {
                let mut p = vec![T::zero(); pm + 1];
                for i in 0..pm {
                    p[i + 1] = p[i] + raw[i];
                }
                p
            }
            2 => {
                let mut p = vec![T::zero(); (pm + 1) * (pm + 1)];
                for i in 0..pm {
                    for j in 0..pm {
                        p[(i + 1) * (pm + 1) + (j + 1)] = raw[i * pm + j]
                            + p[i * (pm + 1) + (j + 1)]
                            + p[(i + 1) * (pm + 1) + j]
                            - p[i * (pm + 1) + j];
                    }
                }
                p
            }
            _ => unimplemented!("supported dimensions are 1 and 2"),
        };
        PaddedPrefix { pm, data }
    }

    /// Sum over the box of `extent` cells per axis starting at `lo`
    /// (padded-lattice coordinates; the box never leaves the lattice).
    fn rect_sum(&self, lo: &[i64; D], extent: i64) -> T {
        let pm = self.pm;
        match D {
            1 => {
                let a = lo[0].clamp(0, pm as i64) as usize;
                let b = (lo[0] + extent).clamp(0, pm as i64) as usize;
                self.data[b] - self.data[a]
            }
            2 => {
                let a0 = lo[0].clamp(0, pm as i64) as usize;
                let b0 = (lo[0] + extent).clamp(0, pm as i64) as usize;
                let a1 = lo[1].clamp(0, pm as i64) as usize;
                let b1 = (lo[1] + extent).clamp(0, pm as i64) as usize;
                let w = pm + 1;
                self.data[b0 * w + b1] + self.data[a0 * w + a1]
                    - self.data[a0 * w + b1]
                    - self.data[b0 * w + a1]
            }
            _ => unimplemented!("supported dimensions are 1 and 2"),
        }
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct HardyReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Measures both sides of the Hardy inequality on the collar `3Q \ Q`:
/// `int_{3Q\Q} ( int_Q |f(y)| / |x-y|^D dy )^u dx <= C ||1_Q f||_u^u`.
/// The ratio is invariant under scaling of `f`.
pub fn hardy_check<T: Real, const D: usize>(
    f: &GridFunction<T, D>,
    q: &DyadicCube<D>,
    u: T,
) -> Result<HardyReport> {
    if u <= T::one() || !u.is_finite() {
        return Err(Error::ExponentRange { context: format!("hardy exponent {u} not in (1,inf)") });
    }
    if !f.supported_in(q) {
        return Err(Error::SupportViolation {
            context: format!("hardy_check requires supp f inside {}", q.label()),
        });
    }
    let depth = f.depth();
    let vol = f.cell_volume();
    let sources: Vec<([T; D], T)> = f
        .cube_cells(q)
        .into_iter()
        .map(|lin| (f.center_of_linear(lin), f.values()[lin].abs()))
        .collect();

    let triple = q.triple::<T>();
    let pm = 3 * cells_per_side(depth);
    let collar: Vec<[T; D]> = MultiIndexIter::new([pm; D])
        .map(|idx| super::grid::padded_center::<T, D>(depth, &idx))
        .filter(|x| triple.contains(x) && !q.contains_point(x))
        .collect();

    let lhs: T = collar
        .par_iter()
        .map(|x| {
            let inner: T = sources
                .iter()
                .map(|(y, v)| *v / dist(x, y).powi(D as i32))
                .sum::<T>()
                * vol;
            inner.powf(u)
        })
        .sum::<T>()
        * vol;

    let rhs: T = sources.iter().map(|(_, v)| v.powf(u)).sum::<T>() * vol;
    let ratio = if rhs == T::zero() { T::zero() } else { lhs / rhs };
    Ok(HardyReport {
        lhs: lhs.to_f64_lossy(),
        rhs: rhs.to_f64_lossy(),
        ratio: ratio.to_f64_lossy(),
    })
}
