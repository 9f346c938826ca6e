//! Decomposition of the bilinear form `<Tf, g>` over adapted martingale
//! pieces: the translated-cube bins (disjoint part), the nested part with
//! its paraproduct/remainder split, the same-cube diagonal, and the
//! transposed half computed through the adjoint operator. Also the
//! coefficient-kernel norm measurements, the weak-boundedness verifiers,
//! and the reduced pairing bound.

use crate::accretive::AccretiveSystem;
use crate::dyadic::{DyadicCube, GridFunction};
use crate::error::{Error, Result};
use crate::martingale::{decompose, AdaptedSystem};
use crate::operators::DiscreteOperator;
use crate::scalar::Real;
use serde::Serialize;
use std::collections::BTreeMap;

/// Named parts of the pairing decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingPart {
    Diagonal,
    Nested,
    Disjoint,
    TransposedNested,
    TransposedDisjoint,
}

#[derive(Clone, Debug, Serialize)]
pub struct PairingDecomposition<const D: usize> {
    pub total: f64,
    pub diagonal: f64,
    pub nested: f64,
    pub disjoint: f64,
    pub transposed_nested: f64,
    pub transposed_disjoint: f64,
    /// Contributions by (part, scale gap k, translation offset m).
    #[serde(skip)]
    pub bins: BTreeMap<(PairingPart, u32, [i64; D]), f64>,
    /// Sum of absolute pair contributions (conditioning of the re-summation).
    pub abs_mass: f64,
    pub parts_sum: f64,
    /// `|total - parts_sum|` over `max(|total|, abs_mass)`.
    pub resum_defect: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PairingBinRow {
    pub part: PairingPart,
    pub k: u32,
    pub m: String,
    pub contribution: f64,
}

impl<const D: usize> PairingDecomposition<D> {
    /// Flat rows of the (part, k, m) table, for report emission.
    pub fn rows(&self) -> Vec<PairingBinRow> {
        self.bins
            .iter()
            .map(|((part, k, m), v)| PairingBinRow {
                part: *part,
                k: *k,
                m: m.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                contribution: *v,
            })
            .collect()
    }
}

/// Exact regrouping of `<Tf, g>` over the pieces of both decompositions.
/// The half with the smaller `f`-side cube is computed directly; the other
/// half goes through the adjoint, so the symmetry claim is exercised rather
/// than assumed.
pub fn decompose_pairing<T: Real, const D: usize>(
    op: &DiscreteOperator<T, D>,
    f: &GridFunction<T, D>,
    g: &GridFunction<T, D>,
    asys1: &AdaptedSystem<T, D>,
    asys2: &AdaptedSystem<T, D>,
) -> Result<PairingDecomposition<D>> {
    let depth = op.depth();
    if depth == 0 {
        return Err(Error::config("pairing decomposition needs depth >= 1"));
    }
    let dec1 = decompose(f, asys1)?;
    let dec2 = decompose(g, asys2)?;
    let total = op.apply(f)?.inner(g).to_f64_lossy();
    let adj = op.adjoint();

    let cubes: Vec<DyadicCube<D>> = DyadicCube::<D>::all(depth - 1).collect();
    let mut pieces1: BTreeMap<DyadicCube<D>, GridFunction<T, D>> = BTreeMap::new();
    let mut pieces2: BTreeMap<DyadicCube<D>, GridFunction<T, D>> = BTreeMap::new();
    for q in &cubes {
        pieces1.insert(*q, dec1.piece(q));
        pieces2.insert(*q, dec2.piece(q));
    }
    let mut images1: BTreeMap<DyadicCube<D>, GridFunction<T, D>> = BTreeMap::new();
    let mut images2: BTreeMap<DyadicCube<D>, GridFunction<T, D>> = BTreeMap::new();
    for q in &cubes {
        images1.insert(*q, op.apply(&pieces1[q])?);
        images2.insert(*q, adj.apply(&pieces2[q])?);
    }

    let mut bins: BTreeMap<(PairingPart, u32, [i64; D]), f64> = BTreeMap::new();
    let mut abs_mass = 0.0f64;

    for r in &cubes {
        let p2 = &pieces2[r];
        let r_cells = p2.cube_cells(r);
        for q in &cubes {
            if q.level >= r.level {
                // Direct half: f-side cube is the smaller one.
                let k = q.level - r.level;
                let u = &images1[q];
                let mut s = T::zero();
                for &i in &r_cells {
                    s += u.values()[i] * p2.values()[i];
                }
                let val = (s * p2.cell_volume()).to_f64_lossy();
                let mut m = [0i64; D];
                for i in 0..D {
                    m[i] = ((q.index[i] >> k) as i64) - (r.index[i] as i64);
                }
                let part = if m.iter().all(|&x| x == 0) {
                    if k == 0 {
                        PairingPart::Diagonal
                    } else {
                        PairingPart::Nested
                    }
                } else {
                    PairingPart::Disjoint
                };
                *bins.entry((part, k, m)).or_insert(0.0) += val;
                abs_mass += val.abs();
            } else {
                // Transposed half via the adjoint image of the g-side piece.
                let k = r.level - q.level;
                let w = &images2[r];
                let p1 = &pieces1[q];
                let mut s = T::zero();
                for &i in &p1.cube_cells(q) {
                    s += w.values()[i] * p1.values()[i];
                }
                let val = (s * p1.cell_volume()).to_f64_lossy();
                let mut m = [0i64; D];
                for i in 0..D {
                    m[i] = ((r.index[i] >> k) as i64) - (q.index[i] as i64);
                }
                let part = if m.iter().all(|&x| x == 0) {
                    PairingPart::TransposedNested
                } else {
                    PairingPart::TransposedDisjoint
                };
                *bins.entry((part, k, m)).or_insert(0.0) += val;
                abs_mass += val.abs();
            }
        }
    }

    let sum_part = |p: PairingPart| -> f64 {
        bins.iter().filter(|((part, _, _), _)| *part == p).map(|(_, v)| v).sum()
    };
    let diagonal = sum_part(PairingPart::Diagonal);
    let nested = sum_part(PairingPart::Nested);
    let disjoint = sum_part(PairingPart::Disjoint);
    let transposed_nested = sum_part(PairingPart::TransposedNested);
    let transposed_disjoint = sum_part(PairingPart::TransposedDisjoint);
    let parts_sum = diagonal + nested + disjoint + transposed_nested + transposed_disjoint;
    let scale = total.abs().max(abs_mass).max(1e-300);
    Ok(PairingDecomposition {
        total,
        diagonal,
        nested,
        disjoint,
        transposed_nested,
        transposed_disjoint,
        bins,
        abs_mass,
        parts_sum,
        resum_defect: (total - parts_sum).abs() / scale,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CoeffNormReport {
    /// Worst `L^2` coefficient-kernel norm per (scale gap, offset).
    pub norms: BTreeMap<(u32, String), f64>,
    /// Fitted decay exponent in the scale gap (`norm ~ 2^(-slope * k)`),
    /// measured at unit offsets.
    pub k_slope: f64,
    /// Fitted decay exponent in the offset (`norm ~ |m|^(-slope)`), measured
    /// at zero scale gap.
    pub m_slope: f64,
    pub k_max: u32,
    pub m_max: i64,
}

/// `L^2` norms of the disjoint-part coefficient kernels. The kernel blocks
/// are supported on (child of Q) x (child of R) by construction, so the
/// squared norm is a sum over the translated cubes of the squared pairings
/// against the child-coefficient functions, scaled by the support volumes.
pub fn coefficient_kernel_norms<T: Real, const D: usize>(
    op: &DiscreteOperator<T, D>,
    asys1: &AdaptedSystem<T, D>,
    asys2: &AdaptedSystem<T, D>,
    k_max: u32,
    m_max: i64,
) -> Result<CoeffNormReport> {
    let depth = op.depth();
    if k_max + 1 > depth {
        return Err(Error::config(format!("k_max {k_max} too deep for depth {depth}")));
    }
    let children_per_axis = 1usize << D;

    // Cache the coefficient functions of the f-side per (Q, i) lazily and
    // the g-side per (R, j).
    let mut norms: BTreeMap<(u32, String), f64> = BTreeMap::new();

    for r in DyadicCube::<D>::all(depth - 1) {
        if r.level + k_max > depth - 1 {
            continue;
        }
        let per_axis = 1i64 << r.level;
        let coeffs2: Vec<GridFunction<T, D>> =
            (0..=children_per_axis).map(|j| asys2.coefficient_fn(&r, j)).collect();
        for m in offsets::<D>(m_max) {
            if m.iter().all(|&x| x == 0) {
                continue;
            }
            let mut s_idx = [0u32; D];
            let mut ok = true;
            for i in 0..D {
                let t = r.index[i] as i64 + m[i];
                if t < 0 || t >= per_axis {
                    ok = false;
                    break;
                }
                s_idx[i] = t as u32;
            }
            if !ok {
                continue;
            }
            let s_cube = DyadicCube::new(r.level, s_idx);
            for k in 0..=k_max {
                let q_level = r.level + k;
                let mut worst = 0.0f64;
                for (j, c2) in coeffs2.iter().enumerate() {
                    if c2.values().iter().all(|v| *v == T::zero()) {
                        continue;
                    }
                    let vol_rj = if j == 0 {
                        r.volume::<f64>()
                    } else {
                        r.volume::<f64>() / children_per_axis as f64
                    };
                    for i in 0..=children_per_axis {
                        let mut sq = 0.0f64;
                        let mut any = false;
                        for q in s_cube.descendants(q_level).into_iter().filter(|c| c.level == q_level)
                        {
                            let c1 = asys1.coefficient_fn(&q, i);
                            if c1.values().iter().all(|v| *v == T::zero()) {
                                continue;
                            }
                            any = true;
                            let pairing = kernel_pairing(op, &c1, c2).to_f64_lossy();
                            let vol_qi = if i == 0 {
                                q.volume::<f64>()
                            } else {
                                q.volume::<f64>() / children_per_axis as f64
                            };
                            sq += pairing * pairing / (vol_qi * vol_rj);
                        }
                        if any {
                            worst = worst.max(sq.sqrt());
                        }
                    }
                }
                let label = m.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
                let entry = norms.entry((k, label)).or_insert(0.0);
                *entry = entry.max(worst);
            }
        }
    }

    // Fit the scale-gap decay at unit offsets.
    let mut k_points: Vec<(f64, f64)> = Vec::new();
    for k in 0..=k_max {
        let mut v = 0.0f64;
        for m in offsets::<D>(1) {
            if m.iter().all(|&x| x == 0) {
                continue;
            }
            let label = m.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            if let Some(n) = norms.get(&(k, label)) {
                v = v.max(*n);
            }
        }
        if v > 0.0 {
            k_points.push((k as f64, v.log2()));
        }
    }
    let k_slope = -fit_slope(&k_points);

    // Fit the offset decay at zero scale gap.
    let mut by_mag: BTreeMap<u64, f64> = BTreeMap::new();
    for m in offsets::<D>(m_max) {
        if m.iter().all(|&x| x == 0) {
            continue;
        }
        let mag2: i64 = m.iter().map(|x| x * x).sum();
        let label = m.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        if let Some(n) = norms.get(&(0, label)) {
            let e = by_mag.entry(mag2 as u64).or_insert(0.0);
            *e = e.max(*n);
        }
    }
    let m_points: Vec<(f64, f64)> = by_mag
        .iter()
        .filter(|(_, v)| **v > 0.0)
        .map(|(mag2, v)| (0.5 * (*mag2 as f64).ln(), v.ln()))
        .collect();
    let m_slope = -fit_slope(&m_points);

    Ok(CoeffNormReport { norms, k_slope, m_slope, k_max, m_max })
}

fn offsets<const D: usize>(m_max: i64) -> Vec<[i64; D]> {
    let side = (2 * m_max + 1) as usize;
    crate::dyadic::MultiIndexIter::new([side; D])
        .map(|idx| {
            let mut m = [0i64; D];
            for i in 0..D {
                m[i] = idx[i] as i64 - m_max;
            }
            m
        })
        .collect()
}

/// `<T a, b>` by direct double summation over the supports.
fn kernel_pairing<T: Real, const D: usize>(
    op: &DiscreteOperator<T, D>,
    a: &GridFunction<T, D>,
    b: &GridFunction<T, D>,
) -> T {
    let vol = a.cell_volume();
    let nz_a: Vec<(usize, [T; D], T)> = a
        .values()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != T::zero())
        .map(|(i, &v)| (i, a.center_of_linear(i), v))
        .collect();
    let nz_b: Vec<(usize, [T; D], T)> = b
        .values()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != T::zero())
        .map(|(i, &v)| (i, b.center_of_linear(i), v))
        .collect();
    let mut s = T::zero();
    for (i, x, bx) in &nz_b {
        let mut row = T::zero();
        for (j, y, ay) in &nz_a {
            if i == j {
                continue;
            }
            row += op.kernel.eval(x, y) * *ay;
        }
        s += row * *bx;
    }
    s * vol * vol
}

fn fit_slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let den = n * sxx - sx * sx;
    if den.abs() < 1e-12 {
        return 0.0;
    }
    (n * sxy - sx * sy) / den
}

#[derive(Clone, Debug, Serialize)]
pub struct NestedSplitReport {
    pub nested_direct: f64,
    pub paraproduct_sum: f64,
    pub remainder_sum: f64,
    /// `|direct - (paraproduct + remainder)|` over the absolute mass.
    pub identity_defect: f64,
    /// Sup norm of the corrected coefficient functions on the complement of
    /// their child cube.
    pub psi_sup_norm: f64,
    /// Worst nested coefficient-kernel `L^2` norm per scale gap (measured
    /// diagnostic; the decay matches the disjoint case empirically).
    pub ktilde_norms: Vec<f64>,
    pub ktilde_slope: f64,
}

/// Split the nested part (strictly smaller f-side cube inside the g-side
/// cube) into the telescoping paraproduct and the corrected remainder, and
/// verify the algebraic identity against the directly summed nested part.
pub fn nested_split<T: Real, const D: usize>(
    op: &DiscreteOperator<T, D>,
    f: &GridFunction<T, D>,
    g: &GridFunction<T, D>,
    asys1: &AdaptedSystem<T, D>,
    asys2: &AdaptedSystem<T, D>,
) -> Result<NestedSplitReport> {
    let depth = op.depth();
    if depth < 2 {
        return Err(Error::config("nested split needs depth >= 2"));
    }
    let dec1 = decompose(f, asys1)?;
    let dec2 = decompose(g, asys2)?;
    let children_per_axis = 1usize << D;

    // Direct nested sum: pairs Q strictly inside R.
    let mut images1: BTreeMap<DyadicCube<D>, GridFunction<T, D>> = BTreeMap::new();
    for q in DyadicCube::<D>::all(depth - 1) {
        images1.insert(q, op.apply(&dec1.difference(&q))?);
    }
    let mut nested_direct = 0.0f64;
    let mut abs_nested = 0.0f64;
    for r in DyadicCube::<D>::all(depth - 2) {
        let p2 = dec2.piece(&r);
        for q in r.descendants(depth - 1) {
            if q == r {
                continue;
            }
            let v = images1[&q].inner(&p2).to_f64_lossy();
            nested_direct += v;
            abs_nested += v.abs();
        }
    }

    // Telescoped paraproduct: every strictly-subordinate cube pairs its
    // difference image against the governing function of its ancestor,
    // weighted by the local average of g.
    let mut paraproduct_sum = 0.0f64;
    for q in DyadicCube::<D>::all(depth - 1) {
        if q.level == 0 {
            continue;
        }
        let h = asys2.governing_fn(&q);
        let w = dec2.f_sums.average(&q) / asys2.governing_avg(&q);
        paraproduct_sum += (images1[&q].inner(h) * w).to_f64_lossy();
    }

    // Remainder: for each parent R, child S and scale gap k, the combined
    // difference of depth k below S pairs against the corrected coefficient
    // functions masked to the complement of S.
    let mut remainder_sum = 0.0f64;
    let mut abs_remainder = 0.0f64;
    let mut psi_sup: f64 = 0.0;
    let mut ktilde_norms = vec![0.0f64; (depth - 1) as usize];

    for r in DyadicCube::<D>::all(depth - 2) {
        let kids = r.children(depth).expect("parent levels only");
        for (s_pos, s_cube) in kids.iter().enumerate() {
            // Corrected coefficient functions for this (R, S).
            // The corrections subtract full functions: governing functions
            // extend over their whole family member, not just the child.
            let mut psis: Vec<(GridFunction<T, D>, T)> = Vec::new();
            if r.level == 0 {
                for j in 1..=children_per_axis {
                    let mut psi = asys2.coefficient_fn_with_top(&r, j);
                    if j - 1 == s_pos {
                        let inv = T::one() / asys2.governing_avg(s_cube);
                        psi = psi.sub(&asys2.governing_fn(s_cube).scale(inv));
                    }
                    psis.push((psi, dec2.f_sums.average(&kids[j - 1])));
                }
            } else {
                for j in 0..=children_per_axis {
                    let coeff = dec2.indexed_avg(&r, j);
                    let mut psi = asys2.coefficient_fn(&r, j);
                    if j == 0 {
                        // Stopping-correction counterpart at this child.
                        let through = asys2.avg_through_parent_of(s_cube);
                        let ratio = through / asys2.governing_avg(s_cube);
                        let inv_r = T::one() / asys2.governing_avg(&r);
                        let w = asys2
                            .governing_fn(s_cube)
                            .scale(ratio * inv_r)
                            .sub(&asys2.governing_fn(&r).scale(inv_r));
                        psi = psi.sub(&w);
                    } else if j - 1 == s_pos {
                        let inv = T::one() / asys2.governing_avg(s_cube);
                        psi = psi.sub(&asys2.governing_fn(s_cube).scale(inv));
                    }
                    psis.push((psi, coeff));
                }
            }

            let masked: Vec<(GridFunction<T, D>, T)> = psis
                .into_iter()
                .map(|(psi, c)| (psi.zeroed_on(s_cube), c))
                .collect();
            for (psi, _) in &masked {
                psi_sup = psi_sup.max(psi.linf_norm().to_f64_lossy());
            }

            // Combined differences of each depth below S.
            for k in 0..=(depth - 1 - s_cube.level) {
                let mut combined = GridFunction::<T, D>::zeros(depth);
                let mut ktilde_sq = vec![0.0f64; masked.len()];
                for q in s_cube.descendants(s_cube.level + k) {
                    if q.level != s_cube.level + k {
                        continue;
                    }
                    combined = combined.add(&dec1.difference(&q));
                    // Nested coefficient-kernel norms: squared pairings of
                    // the child-coefficient functions against the masked
                    // corrected functions.
                    for i in 0..=children_per_axis {
                        let c1 = asys1.coefficient_fn(&q, i);
                        if c1.values().iter().all(|v| *v == T::zero()) {
                            continue;
                        }
                        let vol_qi = if i == 0 {
                            q.volume::<f64>()
                        } else {
                            q.volume::<f64>() / children_per_axis as f64
                        };
                        for (jj, (psi, _)) in masked.iter().enumerate() {
                            let pairing = kernel_pairing(op, &c1, psi).to_f64_lossy();
                            let vol_rj = if jj == 0 && r.level != 0 {
                                r.volume::<f64>()
                            } else {
                                r.volume::<f64>() / children_per_axis as f64
                            };
                            ktilde_sq[jj] += pairing * pairing / (vol_qi * vol_rj);
                        }
                    }
                }
                let tdk = op.apply(&combined)?;
                for (psi, c) in &masked {
                    let v = (tdk.inner(psi) * *c).to_f64_lossy();
                    remainder_sum += v;
                    abs_remainder += v.abs();
                }
                for sq in ktilde_sq {
                    let idx = k as usize;
                    ktilde_norms[idx] = ktilde_norms[idx].max(sq.sqrt());
                }
            }
        }
    }

    let scale = nested_direct
        .abs()
        .max(abs_nested)
        .max(paraproduct_sum.abs() + abs_remainder)
        .max(1e-300);
    let identity_defect = (nested_direct - (paraproduct_sum + remainder_sum)).abs() / scale;

    let pts: Vec<(f64, f64)> = ktilde_norms
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(k, v)| (k as f64, v.log2()))
        .collect();
    let ktilde_slope = -fit_slope(&pts);

    Ok(NestedSplitReport {
        nested_direct,
        paraproduct_sum,
        remainder_sum,
        identity_defect,
        psi_sup_norm: psi_sup,
        ktilde_norms,
        ktilde_slope,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WbpMode {
    /// Antisymmetric kernel paired with one shared system: exact
    /// cancellation.
    Antisymmetric,
    /// Distinct systems with certified off-diagonal averages.
    SpecialOffdiag,
    /// Systems defined on every dyadic cube; the off-diagonal control is
    /// derived pointwise.
    AllCubes,
}

#[derive(Clone, Debug, Serialize)]
pub struct WbpReport {
    pub mode: WbpMode,
    /// Worst `|<T(1_Q b1), 1_Q b2>| / |Q|`.
    pub worst_ratio: f64,
    /// Antisymmetric mode: worst pairing normalized by its absolute mass.
    pub worst_normalized_defect: f64,
    pub worst_testing_term: f64,
    pub worst_hardy_term: f64,
    pub worst_offdiag_term: f64,
    /// All-cubes mode: worst pointwise normalized off-diagonal value.
    pub worst_pointwise_offdiag: f64,
    pub cubes_checked: usize,
}

/// Are two systems literally the same family of functions?
pub fn systems_identical<T: Real, const D: usize>(
    a: &AccretiveSystem<T, D>,
    b: &AccretiveSystem<T, D>,
) -> bool {
    if a.depth() != b.depth() || a.len() != b.len() {
        return false;
    }
    a.cubes().all(|q| match (a.get(q), b.get(q)) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    })
}

/// Diagonal testing bound `|<T(1_Q b1_anc), 1_Q b2_anc>| <= C |Q|` over all
/// dyadic cubes, measured per mode.
pub fn wbp_check<T: Real, const D: usize>(
    op: &DiscreteOperator<T, D>,
    sys1: &AccretiveSystem<T, D>,
    sys2: &AccretiveSystem<T, D>,
    mode: WbpMode,
    level_cap: u32,
) -> Result<WbpReport> {
    let depth = op.depth();
    let cap = level_cap.min(depth);
    match mode {
        WbpMode::Antisymmetric => {
            if !op.kernel.antisymmetric {
                return Err(Error::config(
                    "antisymmetric weak-boundedness mode needs an antisymmetric kernel",
                ));
            }
            if !systems_identical(sys1, sys2) {
                return Err(Error::config(
                    "antisymmetric weak-boundedness mode needs one shared system",
                ));
            }
        }
        WbpMode::SpecialOffdiag => {}
        WbpMode::AllCubes => {
            // Requires a function on every dyadic cube.
            for q in DyadicCube::<D>::all(depth) {
                if sys1.sparse_family().is_none() && sys1.get(&q).is_none() {
                    return Err(Error::MissingInput {
                        context: format!("all-cubes mode misses {}", q.label()),
                    });
                }
            }
        }
    }

    let vol = T::lit(0.5f64.powi((D as u32 * depth) as i32));
    let mut worst_ratio = 0.0f64;
    let mut worst_defect = 0.0f64;
    let mut worst_testing = 0.0f64;
    let mut worst_hardy = 0.0f64;
    let mut worst_offdiag = 0.0f64;
    let mut worst_pointwise = 0.0f64;
    let mut count = 0usize;

    for q in DyadicCube::<D>::all(cap) {
        count += 1;
        let (_, b1) = sys1.governing(&q)?;
        let (_, b2) = sys2.governing(&q)?;
        let phi1 = b1.restricted_to(&q);
        let phi2 = b2.restricted_to(&q);

        // Signed and absolute pairings in one pass over the cube's cells.
        let cells = phi1.cube_cells(&q);
        let mut signed = T::zero();
        let mut absmass = T::zero();
        for &i in &cells {
            let vi = phi2.values()[i];
            if vi == T::zero() {
                continue;
            }
            let x = phi1.center_of_linear(i);
            let mut row = T::zero();
            let mut row_abs = T::zero();
            for &j in &cells {
                if i == j {
                    continue;
                }
                let vj = phi1.values()[j];
                if vj == T::zero() {
                    continue;
                }
                let kv = op.kernel.eval(&x, &phi1.center_of_linear(j));
                row += kv * vj;
                row_abs += kv.abs() * vj.abs();
            }
            signed += row * vi;
            absmass += row_abs * vi.abs();
        }
        let pairing = (signed * vol * vol).to_f64_lossy();
        let absmass = (absmass * vol * vol).to_f64_lossy();
        let qvol = q.volume::<f64>();
        worst_ratio = worst_ratio.max(pairing.abs() / qvol);
        if absmass > 0.0 {
            worst_defect = worst_defect.max(pairing.abs() / absmass);
        }

        if mode != WbpMode::Antisymmetric {
            let b2_sup = cells
                .iter()
                .map(|&i| phi2.values()[i].abs())
                .fold(T::zero(), |m, v| m.max(v))
                .to_f64_lossy();
            // Testing term.
            let tb1 = op.apply(b1)?;
            let avg_tb1 = cells
                .iter()
                .map(|&i| tb1.values()[i].abs())
                .sum::<T>()
                .to_f64_lossy()
                / cells.len() as f64;
            worst_testing = worst_testing.max(avg_tb1 * b2_sup);
            // Hardy term: the collar of Q against the cube itself.
            let collar = b1
                .masked(&crate::dyadic::Region::triple_of(&q))
                .zeroed_on(&q);
            let hardy = (collar.lp_norm(T::lit(2.0)) * phi2.lp_norm(T::lit(2.0))).to_f64_lossy()
                / qvol;
            worst_hardy = worst_hardy.max(hardy);
            // Off-diagonal term.
            let far = b1.masked(&crate::dyadic::Region::triple_complement_of(&q));
            let t_far = op.apply(&far)?;
            let avg_far = cells
                .iter()
                .map(|&i| t_far.values()[i].abs())
                .sum::<T>()
                .to_f64_lossy()
                / cells.len() as f64;
            worst_offdiag = worst_offdiag.max(avg_far * b2_sup);
            if mode == WbpMode::AllCubes {
                let sup_far = cells
                    .iter()
                    .map(|&i| t_far.values()[i].abs())
                    .fold(T::zero(), |m, v| m.max(v))
                    .to_f64_lossy();
                worst_pointwise = worst_pointwise.max(sup_far);
            }
        }
    }

    Ok(WbpReport {
        mode,
        worst_ratio,
        worst_normalized_defect: worst_defect,
        worst_testing_term: worst_testing,
        worst_hardy_term: worst_hardy,
        worst_offdiag_term: worst_offdiag,
        worst_pointwise_offdiag: worst_pointwise,
        cubes_checked: count,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BabyTbReport {
    /// Worst `|<Tf, g>| / (||f||_{s'} ||g||_{s'} |Q0|^(1 - 2/s'))` over the
    /// sample pairs.
    pub worst_normalized_pairing: f64,
    /// The same bound exercised along the testing route `f = g = b_root`.
    pub testing_route: f64,
    pub s_prime: f64,
    pub samples: usize,
}

/// Reduced pairing bound: sampled normalized pairings against mean-zero
/// noise and lacunary combs. The hypotheses (validated sparse systems and a
/// passing diagonal bound) are the caller's responsibility; the exponent
/// constraint is enforced here.
pub fn baby_tb_bound<T: Real, const D: usize>(
    op: &DiscreteOperator<T, D>,
    sys1: &AccretiveSystem<T, D>,
    sys2: &AccretiveSystem<T, D>,
    s_prime: f64,
    samples: usize,
    seed: u64,
) -> Result<BabyTbReport> {
    let t = sys1.u.min(sys2.u);
    let t = if t.is_finite() { t } else { 2.0 };
    let floor = (t / (t - 1.0)).max(2.0);
    if s_prime <= floor {
        return Err(Error::ExponentRange {
            context: format!("pairing exponent {s_prime} must exceed {floor}"),
        });
    }
    let depth = op.depth();
    let base_vol = 1.0f64;
    let normalizer = base_vol.powf(1.0 - 2.0 / s_prime);
    let mut worst = 0.0f64;
    for idx in 0..samples {
        let f = crate::testfns::normalized_sample::<T, D>(depth, s_prime, 2 * idx, seed);
        let g = crate::testfns::normalized_sample::<T, D>(depth, s_prime, 2 * idx + 1, seed ^ 0xabcd);
        let pairing = op.apply(&f)?.inner(&g).to_f64_lossy().abs();
        let fs = f.lp_norm(T::lit(s_prime)).to_f64_lossy();
        let gs = g.lp_norm(T::lit(s_prime)).to_f64_lossy();
        if fs > 0.0 && gs > 0.0 {
            worst = worst.max(pairing / (fs * gs * normalizer));
        }
    }
    // Testing route: the pairing bound applied with the root test function
    // on one side recovers the localized testing estimate.
    let root = DyadicCube::root();
    let (_, b1) = sys1.governing(&root)?;
    let s = s_prime / (s_prime - 1.0);
    let tb = op.apply(b1)?;
    let testing_route =
        tb.lp_norm(T::lit(s)).to_f64_lossy() / root.volume::<f64>().powf(1.0 / s);
    Ok(BabyTbReport { worst_normalized_pairing: worst, testing_route, s_prime, samples })
}
