//! Accretive test-function systems: one function per dyadic cube, supported
//! on its cube with exact unit mean and a normalized `L^p` size bound, plus
//! the sparse-family variant where nondegeneracy is required on all
//! admissible subcubes of each family member.

use crate::dyadic::{CubeSums, DyadicCube, GridFunction};
use crate::error::{Error, Result};
use crate::operators::DiscreteOperator;
use crate::scalar::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

/// A stopping-time family with its sparseness parameter: the members of the
/// family strictly inside any member cover at most a `(1 - tau)` fraction.
#[derive(Clone, Debug)]
pub struct SparseFamily<const D: usize> {
    members: Vec<DyadicCube<D>>,
    member_set: HashSet<DyadicCube<D>>,
    pub tau: f64,
    /// Lower bound certified for `|avg_{Q'} b_Q|` on admissible subcubes.
    pub c0: f64,
}

impl<const D: usize> SparseFamily<D> {
    pub fn new(mut members: Vec<DyadicCube<D>>, tau: f64, c0: f64) -> Result<Self> {
        if !members.contains(&DyadicCube::root()) {
            return Err(Error::config("sparse family must contain the reference cube"));
        }
        members.sort();
        members.dedup();
        let member_set = members.iter().copied().collect();
        Ok(SparseFamily { members, member_set, tau, c0 })
    }

    pub fn members(&self) -> &[DyadicCube<D>] {
        &self.members
    }

    pub fn contains(&self, q: &DyadicCube<D>) -> bool {
        self.member_set.contains(q)
    }

    /// Minimal family member containing `q` (the family contains the root,
    /// so the walk terminates).
    pub fn ancestor(&self, q: &DyadicCube<D>) -> DyadicCube<D> {
        let mut cur = *q;
        loop {
            if self.member_set.contains(&cur) {
                return cur;
            }
            cur = cur.parent().expect("root is always a member");
        }
    }

    /// Check the covering condition and return the worst covered fraction.
    pub fn verify_sparseness(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for q in &self.members {
            let inside: Vec<&DyadicCube<D>> = self
                .members
                .iter()
                .filter(|m| **m != *q && q.contains_cube(m))
                .collect();
            // Union measure = sum over maximal members strictly inside q.
            let covered: f64 = inside
                .iter()
                .filter(|m| {
                    !inside.iter().any(|other| **other != ***m && other.contains_cube(m))
                })
                .map(|m| m.volume::<f64>())
                .sum();
            let fraction = covered / q.volume::<f64>();
            worst = worst.max(fraction);
            if fraction > (1.0 - self.tau) + 1e-12 {
                return Err(Error::SparsenessViolated { cube: q.label(), fraction });
            }
        }
        Ok(worst)
    }
}

/// Measured constants of a system (worst cases over cubes, or over
/// admissible pairs in the sparse variant).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Minimum of `|avg b|`; 1 for exactly normalized systems.
    pub worst_nondeg: f64,
    /// Maximum normalized `L^p` size.
    pub worst_size: f64,
    /// Maximum normalized `L^u` testing average of `T b`.
    pub worst_testing: f64,
    /// Same over the doubled cube `2Q` (padded evaluation).
    pub worst_buffered: f64,
    /// `||T b_Q||_{L^u(padded)} / |Q|^{1/u}`, the globalized testing bound.
    pub worst_global: f64,
}

/// A family `Q -> b_Q` with declared exponents `(p, u)`.
#[derive(Clone)]
pub struct AccretiveSystem<T, const D: usize> {
    assignment: BTreeMap<DyadicCube<D>, GridFunction<T, D>>,
    depth: u32,
    pub p: f64,
    pub u: f64,
    pub buffered: bool,
    sparse: Option<SparseFamily<D>>,
    pub measured: Option<ValidationReport>,
}

impl<T: Real, const D: usize> AccretiveSystem<T, D> {
    /// Build from an explicit assignment; enforces exact support containment.
    pub fn new(
        assignment: BTreeMap<DyadicCube<D>, GridFunction<T, D>>,
        depth: u32,
        p: f64,
        u: f64,
    ) -> Result<Self> {
        for (q, b) in &assignment {
            if b.depth() != depth {
                return Err(Error::DepthMismatch { expected: depth, got: b.depth() });
            }
            if !b.supported_in(q) {
                return Err(Error::SupportViolation {
                    context: format!("test function leaks outside its cube {}", q.label()),
                });
            }
        }
        Ok(AccretiveSystem { assignment, depth, p, u, buffered: true, sparse: None, measured: None })
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn cubes(&self) -> impl Iterator<Item = &DyadicCube<D>> {
        self.assignment.keys()
    }

    pub fn get(&self, q: &DyadicCube<D>) -> Option<&GridFunction<T, D>> {
        self.assignment.get(q)
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn sparse_family(&self) -> Option<&SparseFamily<D>> {
        self.sparse.as_ref()
    }

    pub fn with_sparse(mut self, family: SparseFamily<D>) -> Self {
        self.sparse = Some(family);
        self
    }

    /// Test function governing a cube: in the sparse variant the minimal
    /// family member's function, otherwise the cube's own.
    pub fn governing(&self, q: &DyadicCube<D>) -> Result<(&DyadicCube<D>, &GridFunction<T, D>)> {
        let anc = match &self.sparse {
            Some(fam) => fam.ancestor(q),
            None => *q,
        };
        match self.assignment.get_key_value(&anc) {
            Some((k, v)) => Ok((k, v)),
            None => Err(Error::MissingInput {
                context: format!("no test function assigned to {}", anc.label()),
            }),
        }
    }

    /// Quick nondegeneracy check: exactly normalized means for full systems,
    /// the certified floor on family members for sparse ones.
    pub fn check_nondegenerate(&self) -> Result<()> {
        match &self.sparse {
            None => {
                for (q, b) in &self.assignment {
                    let avg = b.average(q).to_f64_lossy();
                    if (avg - 1.0).abs() > 1e-6 {
                        return Err(Error::DegenerateSystem {
                            context: format!("avg over {} is {avg}, expected 1", q.label()),
                        });
                    }
                }
            }
            Some(fam) => {
                if fam.c0 <= 0.0 {
                    return Err(Error::DegenerateSystem {
                        context: "sparse system carries no positive nondegeneracy floor".into(),
                    });
                }
                for (q, b) in &self.assignment {
                    let avg = b.average(q).to_f64_lossy().abs();
                    if avg < 0.5 * fam.c0 {
                        return Err(Error::DegenerateSystem {
                            context: format!(
                                "avg over member {} is {avg}, below floor {}",
                                q.label(),
                                fam.c0
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Serialize as a directory: a JSON manifest plus one flat CSV per cube.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = SystemManifest {
            depth: self.depth,
            dim: D,
            p: self.p,
            u: self.u,
            buffered: self.buffered,
            sparse: self.sparse.as_ref().map(|s| SparseManifest {
                members: s.members.iter().map(|q| q.label()).collect(),
                tau: s.tau,
                c0: s.c0,
            }),
            cubes: self.assignment.keys().map(|q| q.label()).collect(),
            measured: self.measured,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        for (q, b) in &self.assignment {
            b.write_csv(&dir.join(format!("b_{}.csv", q.label())))?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SystemManifest {
    depth: u32,
    dim: usize,
    p: f64,
    u: f64,
    buffered: bool,
    sparse: Option<SparseManifest>,
    cubes: Vec<String>,
    measured: Option<ValidationReport>,
}

#[derive(Serialize, Deserialize)]
struct SparseManifest {
    members: Vec<String>,
    tau: f64,
    c0: f64,
}

/// Normalized `L^p` average over a fixed cell count; `p = inf` gives the max.
fn normalized_lp<T: Real>(vals: impl Iterator<Item = T>, n: usize, p: f64) -> f64 {
    if p.is_infinite() {
        return vals.fold(T::zero(), |m, v| m.max(v.abs())).to_f64_lossy();
    }
    let pe = T::lit(p);
    let s: T = vals.map(|v| v.abs().powf(pe)).sum();
    (s / T::from_count(n)).powf(T::one() / pe).to_f64_lossy()
}

/// Measure the four normalized quantities of the system under an operator,
/// over each assigned cube, or over each admissible pair in the sparse
/// variant. Support violations are a hard error, not a constant.
pub fn validate<T: Real, const D: usize>(
    sys: &AccretiveSystem<T, D>,
    op: &DiscreteOperator<T, D>,
) -> Result<ValidationReport> {
    if sys.is_empty() {
        return Err(Error::MissingInput { context: "empty accretive system".into() });
    }
    let depth = sys.depth();
    let mut worst_nondeg = f64::INFINITY;
    let mut worst_size = 0.0f64;
    let mut worst_testing = 0.0f64;
    let mut worst_buffered = 0.0f64;
    let mut worst_global = 0.0f64;

    for (q, b) in &sys.assignment {
        if !b.supported_in(q) {
            return Err(Error::SupportViolation {
                context: format!("test function leaks outside {}", q.label()),
            });
        }
        let tb = op.apply(b)?;
        let sums_b = CubeSums::new(b);
        let sums_bp = CubeSums::new(&b.map(|v| {
            if sys.p.is_infinite() { v.abs() } else { v.abs().powf(T::lit(sys.p)) }
        }));
        let sums_tu = CubeSums::new(&tb.map(|v| {
            if sys.u.is_infinite() { v.abs() } else { v.abs().powf(T::lit(sys.u)) }
        }));

        let admissible: Vec<DyadicCube<D>> = match sys.sparse_family() {
            None => vec![*q],
            Some(fam) => q
                .descendants(depth)
                .into_iter()
                .filter(|sub| fam.ancestor(sub) == *q)
                .collect(),
        };
        for sub in &admissible {
            worst_nondeg = worst_nondeg.min(sums_b.average(sub).to_f64_lossy().abs());
            let size = if sys.p.is_infinite() {
                // Max over the subcube's cells.
                normalized_lp(b.cube_cells(sub).into_iter().map(|i| b.values()[i]), 1, sys.p)
            } else {
                sums_bp.average(sub).to_f64_lossy().powf(1.0 / sys.p)
            };
            worst_size = worst_size.max(size);
            let testing = if sys.u.is_infinite() {
                normalized_lp(tb.cube_cells(sub).into_iter().map(|i| tb.values()[i]), 1, sys.u)
            } else {
                sums_tu.average(sub).to_f64_lossy().powf(1.0 / sys.u)
            };
            worst_testing = worst_testing.max(testing);
        }

        // Buffered testing over the doubled cube, padded evaluation.
        let double = q.double::<T>();
        let pm = crate::dyadic::padded_cells_per_side(depth);
        let mut vals: Vec<T> = Vec::new();
        for idx in crate::dyadic::MultiIndexIter::new([pm; D]) {
            let x = crate::dyadic::padded_center::<T, D>(depth, &idx);
            if double.contains(&x) {
                vals.push(op.apply_at(b, &x));
            }
        }
        let n2q = vals.len();
        let ueff = if sys.u.is_infinite() { f64::INFINITY } else { sys.u };
        worst_buffered = worst_buffered.max(normalized_lp(vals.into_iter(), n2q, ueff));

        // Globalized testing over the whole padded box.
        let tb_pad = op.apply_padded(b)?;
        let global = if sys.u.is_infinite() {
            tb_pad.values().iter().fold(T::zero(), |m, v| m.max(v.abs())).to_f64_lossy()
        } else {
            let u = T::lit(sys.u);
            let norm = tb_pad.lp_norm(u).to_f64_lossy();
            norm / q.volume::<f64>().powf(1.0 / sys.u)
        };
        worst_global = worst_global.max(global);
    }

    Ok(ValidationReport {
        worst_nondeg,
        worst_size,
        worst_testing,
        worst_buffered,
        worst_global,
    })
}

/// The indicator system `b_Q = 1_Q` on every cube down to `depth`.
pub fn make_indicator_system<T: Real, const D: usize>(depth: u32) -> AccretiveSystem<T, D> {
    let mut assignment = BTreeMap::new();
    for q in DyadicCube::<D>::all(depth) {
        assignment.insert(q, GridFunction::indicator(depth, &q));
    }
    AccretiveSystem {
        assignment,
        depth,
        p: f64::INFINITY,
        u: f64::INFINITY,
        buffered: true,
        sparse: None,
        measured: None,
    }
}

/// Stress generator: unit-mean test functions whose `L^p` size stays below
/// `2 * roughness` while the sup norm reaches `roughness^(p')` on every cube
/// with enough resolution below it (tame, indicator-like functions at
/// roughness 1). The shape is
/// `b = 1_Q + lambda * (1_E - |E|/|Q\E| * 1_{Q\E})` with `E` a random dyadic
/// subcube of `Q`, so the mean is exactly one by construction; the spike
/// height is `lambda = roughness^(p') - 1` and `|E|` is small enough that
/// the spike costs about `roughness` in normalized `L^p`.
///
/// `max_spike_level` caps the absolute level of `E`: runs at different grid
/// depths then build the same functions on every cube both depths resolve,
/// which is what makes refinement comparisons meaningful. Cubes at or below
/// the cap get the plain indicator; cubes with only partial room shrink the
/// spike to stay inside the size budget.
pub fn make_rough_system<T: Real, const D: usize>(
    depth: u32,
    p: f64,
    roughness: f64,
    seed: u64,
    max_spike_level: u32,
) -> Result<AccretiveSystem<T, D>> {
    if roughness < 1.0 {
        return Err(Error::config(format!("roughness {roughness} must be >= 1")));
    }
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::ExponentRange { context: format!("rough system p = {p}") });
    }
    let p_prime = p / (p - 1.0);
    let spike_cap = max_spike_level.min(depth);
    let lambda_target = roughness.powf(p_prime) - 1.0;
    // Relative spike measure that prices the spike at about `roughness`.
    let mu_target = roughness.powf(-p_prime * p).min(0.25);
    let rel_levels = (((1.0 / mu_target).log2() / D as f64).ceil() as u32).max(1);

    let mut assignment = BTreeMap::new();
    for q in DyadicCube::<D>::all(depth) {
        let b = if q.level >= spike_cap || lambda_target <= 0.0 {
            GridFunction::indicator(depth, &q)
        } else {
            let e_level = (q.level + rel_levels).min(spike_cap);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ cube_hash(&q));
            let shift = e_level - q.level;
            let mut e_index = [0u32; D];
            for i in 0..D {
                let off = rng.gen_range(0..(1u32 << shift));
                e_index[i] = (q.index[i] << shift) + off;
            }
            let e = DyadicCube::new(e_level, e_index);
            let mu = 0.5f64.powi((D as u32 * shift) as i32);
            let size_of = |l: f64| {
                let off_part = (1.0 - l * mu / (1.0 - mu)).abs().powf(p);
                (mu * (1.0 + l).powf(p) + (1.0 - mu) * off_part).powf(1.0 / p)
            };
            let mut lambda = lambda_target;
            while size_of(lambda) > 2.0 * roughness && lambda > 1e-9 {
                lambda *= 0.95;
            }
            let beta = T::lit(lambda * mu / (1.0 - mu));
            let lam = T::lit(lambda);
            let mut b = GridFunction::zeros(depth);
            for i in b.cube_cells(&q) {
                b.values_mut()[i] = T::one() - beta;
            }
            for i in b.cube_cells(&e) {
                b.values_mut()[i] = T::one() + lam;
            }
            b
        };
        assignment.insert(q, b);
    }
    let mut sys = AccretiveSystem::new(assignment, depth, p, p)?;
    sys.buffered = true;
    Ok(sys)
}

fn cube_hash<const D: usize>(q: &DyadicCube<D>) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ q.level as u64;
    for i in 0..D {
        h = h.wrapping_mul(0x100000001b3).wrapping_add(q.index[i] as u64 + 1);
    }
    h.wrapping_mul(0x9e3779b97f4a7c15)
}

/// Restrict a full system to a stopping family, verifying sparseness and
/// re-measuring nondegeneracy on admissible subcubes only.
pub fn restrict_to_sparse<T: Real, const D: usize>(
    sys: &AccretiveSystem<T, D>,
    members: Vec<DyadicCube<D>>,
    tau: f64,
) -> Result<AccretiveSystem<T, D>> {
    let family = SparseFamily::new(members, tau, 0.0)?;
    family.verify_sparseness()?;

    let mut assignment = BTreeMap::new();
    for q in family.members() {
        let b = sys.get(q).ok_or_else(|| Error::MissingInput {
            context: format!("system has no function for family member {}", q.label()),
        })?;
        assignment.insert(*q, b.clone());
    }

    // Measured nondegeneracy floor over admissible pairs.
    let mut c0 = f64::INFINITY;
    for q in family.members() {
        let b = &assignment[q];
        let sums = CubeSums::new(b);
        for sub in q.descendants(sys.depth()) {
            if family.ancestor(&sub) == *q {
                c0 = c0.min(sums.average(&sub).to_f64_lossy().abs());
            }
        }
    }
    let family = SparseFamily { c0, ..family };
    let mut out = AccretiveSystem::new(assignment, sys.depth(), sys.p, sys.u)?;
    out.buffered = sys.buffered;
    out.sparse = Some(family);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{make_kernel, KernelKind, KernelParams};

    fn hilbert_op(depth: u32) -> DiscreteOperator<f64, 1> {
        let k = make_kernel(KernelKind::Hilbert, KernelParams::default(), depth).unwrap();
        DiscreteOperator::new(k, depth)
    }

    #[test]
    fn indicator_system_validates_with_unit_constants() {
        let depth = 5;
        let sys = make_indicator_system::<f64, 1>(depth);
        let op = hilbert_op(depth);
        let r = validate(&sys, &op).unwrap();
        assert!((r.worst_nondeg - 1.0).abs() < 1e-12);
        assert!((r.worst_size - 1.0).abs() < 1e-12);
        assert!(r.worst_testing.is_finite());
        for q in sys.cubes() {
            assert_eq!(sys.get(q).unwrap().average(q), 1.0);
        }
    }

    #[test]
    fn indicator_size_is_one_for_every_exponent() {
        let depth = 4;
        let mut sys = make_indicator_system::<f64, 1>(depth);
        for p in [1.5, 2.0, 3.0] {
            sys.p = p;
            let op = hilbert_op(depth);
            let r = validate(&sys, &op).unwrap();
            assert!((r.worst_size - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn half_indicator_size_formula() {
        // b_Q = 2 * indicator of the left half: nondeg 1, size 2^(1-1/p).
        let depth = 5;
        let root = DyadicCube::<1>::root();
        let left = DyadicCube::<1>::new(1, [0]);
        let b = GridFunction::<f64, 1>::indicator(depth, &left).scale(2.0);
        let mut assignment = BTreeMap::new();
        assignment.insert(root, b);
        let p = 1.5;
        let sys = AccretiveSystem::new(assignment, depth, p, p).unwrap();
        let op = hilbert_op(depth);
        let r = validate(&sys, &op).unwrap();
        assert!((r.worst_nondeg - 1.0).abs() < 1e-12);
        assert!((r.worst_size - 2.0f64.powf(1.0 - 1.0 / p)).abs() < 1e-12);
    }

    #[test]
    fn support_violation_is_a_hard_error() {
        let depth = 4;
        let root = DyadicCube::<1>::root();
        let sub = DyadicCube::<1>::new(1, [1]);
        let mut assignment = BTreeMap::new();
        assignment.insert(sub, GridFunction::<f64, 1>::indicator(depth, &root));
        assert!(matches!(
            AccretiveSystem::new(assignment, depth, 2.0, 2.0),
            Err(Error::SupportViolation { .. })
        ));
    }

    #[test]
    fn rough_system_has_exact_unit_means_and_bounded_size() {
        let depth = 8;
        let rough = 4.0;
        let p = 1.5;
        let sys = make_rough_system::<f64, 1>(depth, p, rough, 7, depth).unwrap();
        let mut max_inf: f64 = 0.0;
        for q in sys.cubes() {
            let b = sys.get(q).unwrap();
            let mean = b.average(q);
            assert!((mean - 1.0).abs() < 1e-11, "mean {mean} at {}", q.label());
            let cells = b.cube_cells(q);
            let n = cells.len();
            let size = normalized_lp(cells.into_iter().map(|i| b.values()[i]), n, p);
            assert!(size <= 2.0 * rough + 1e-9, "size {size} at {}", q.label());
            max_inf = max_inf.max(b.linf_norm());
        }
        // The sup-norm target is reached where resolution allows.
        assert!(max_inf >= rough.powf(p / (p - 1.0)) / 2.0, "max sup-norm {max_inf}");
        assert!(max_inf >= 2.0);
        // On cubes with full room the spike hits the target exactly.
        let root_b = sys.get(&DyadicCube::root()).unwrap();
        assert!((root_b.linf_norm() - rough.powf(p / (p - 1.0))).abs() < 1e-9);
    }

    #[test]
    fn rough_system_is_deterministic_under_seed() {
        let a = make_rough_system::<f64, 1>(6, 1.5, 4.0, 42, 6).unwrap();
        let b = make_rough_system::<f64, 1>(6, 1.5, 4.0, 42, 6).unwrap();
        let c = make_rough_system::<f64, 1>(6, 1.5, 4.0, 43, 6).unwrap();
        let mut differs = false;
        for q in a.cubes() {
            assert_eq!(a.get(q).unwrap(), b.get(q).unwrap());
            differs |= a.get(q).unwrap() != c.get(q).unwrap();
        }
        assert!(differs, "different seeds should move the spikes");
    }

    #[test]
    fn rough_system_at_unit_roughness_is_tame() {
        let sys = make_rough_system::<f64, 1>(6, 1.5, 1.0, 3, 6).unwrap();
        for q in sys.cubes() {
            assert!(sys.get(q).unwrap().linf_norm() <= 2.0 + 1e-9);
        }
        assert!(make_rough_system::<f64, 1>(6, 1.5, 0.5, 3, 6).is_err());
    }

    #[test]
    fn rough_system_is_refinement_consistent_above_the_cap() {
        let coarse = make_rough_system::<f64, 1>(6, 1.5, 4.0, 11, 6).unwrap();
        let fine = make_rough_system::<f64, 1>(7, 1.5, 4.0, 11, 6).unwrap();
        for q in coarse.cubes() {
            let b6 = coarse.get(q).unwrap().refine(7);
            let b7 = fine.get(q).unwrap();
            assert_eq!(&b6, b7, "cube {}", q.label());
        }
    }

    #[test]
    fn sparse_restriction_verifies_and_remeasures() {
        let depth = 5;
        let sys = make_indicator_system::<f64, 1>(depth);
        let members = vec![
            DyadicCube::<1>::root(),
            DyadicCube::<1>::new(2, [0]),
            DyadicCube::<1>::new(2, [3]),
        ];
        let sparse = restrict_to_sparse(&sys, members, 0.5).unwrap();
        let fam = sparse.sparse_family().unwrap();
        assert!((fam.c0 - 1.0).abs() < 1e-12);
        assert_eq!(fam.ancestor(&DyadicCube::new(4, [1])), DyadicCube::new(2, [0]));
        assert_eq!(fam.ancestor(&DyadicCube::new(4, [8])), DyadicCube::root());

        // The root plus all its children is not sparse for positive tau.
        let all_children: Vec<_> =
            std::iter::once(DyadicCube::<1>::root())
                .chain(DyadicCube::<1>::root().children(depth).unwrap())
                .collect();
        assert!(matches!(
            restrict_to_sparse(&sys, all_children, 0.25),
            Err(Error::SparsenessViolated { .. })
        ));

        // A single-member family is trivially sparse for any tau <= 1.
        let single = restrict_to_sparse(&sys, vec![DyadicCube::<1>::root()], 1.0).unwrap();
        assert!(single.sparse_family().unwrap().verify_sparseness().is_ok());
    }

    #[test]
    fn sparse_family_must_contain_root() {
        let sys = make_indicator_system::<f64, 1>(4);
        assert!(restrict_to_sparse(&sys, vec![DyadicCube::new(1, [0])], 0.5).is_err());
    }

    #[test]
    fn validation_is_dilation_invariant() {
        // The same profile transplanted onto a subcube yields the same
        // normalized constants.
        let depth = 6;
        let p = 1.5;
        let root = DyadicCube::<1>::root();
        let profile = |t: f64| 1.0 + 0.5 * (6.28318 * t).sin();

        let b_root = GridFunction::<f64, 1>::from_fn(depth, |x| profile(x[0]));
        let mut a1 = BTreeMap::new();
        a1.insert(root, b_root);
        let s1 = AccretiveSystem::new(a1, depth, p, p).unwrap();

        let sub = DyadicCube::<1>::new(2, [1]);
        let lo = sub.lower::<f64>()[0];
        let side = sub.side::<f64>();
        let mut b_sub = GridFunction::<f64, 1>::zeros(depth);
        for i in b_sub.cube_cells(&sub) {
            let x = b_sub.center_of_linear(i)[0];
            b_sub.values_mut()[i] = profile((x - lo) / side);
        }
        let mut a2 = BTreeMap::new();
        a2.insert(sub, b_sub);
        let s2 = AccretiveSystem::new(a2, depth, p, p).unwrap();

        let op = hilbert_op(depth);
        let r1 = validate(&s1, &op).unwrap();
        let r2 = validate(&s2, &op).unwrap();
        // Nondegeneracy and size are scale-free; they agree up to the
        // quadrature difference of sampling the profile at shifted points.
        assert!((r1.worst_nondeg - r2.worst_nondeg).abs() < 1e-2);
        assert!((r1.worst_size - r2.worst_size).abs() < 1e-2);
    }

    #[test]
    fn holder_monotonicity_of_normalized_sizes() {
        // A (p, u) system is a (t, t) system for t <= min(p, u) with
        // constants no larger: normalized L^t averages are monotone in t.
        let sys = make_rough_system::<f64, 1>(6, 1.5, 4.0, 5, 6).unwrap();
        for q in sys.cubes() {
            let b = sys.get(q).unwrap();
            let cells = b.cube_cells(q);
            let n = cells.len();
            let s_small =
                normalized_lp(cells.iter().map(|&i| b.values()[i]), n, 1.2);
            let s_big = normalized_lp(cells.iter().map(|&i| b.values()[i]), n, 1.5);
            assert!(s_small <= s_big + 1e-12);
        }
    }

    #[test]
    fn save_dir_writes_manifest_and_functions() {
        let dir = std::env::temp_dir().join("tblab_sys_save_test");
        let _ = std::fs::remove_dir_all(&dir);
        let sys = make_indicator_system::<f64, 1>(3);
        sys.save_dir(&dir).unwrap();
        assert!(dir.join("manifest.json").exists());
        assert!(dir.join("b_L0I0.csv").exists());
    }
}
