//! Deterministic input generators for the verifiers.
//!
//! Depth-stability comparisons apply the machinery at two grid depths to the
//! same underlying function, so the generators here are refinement
//! consistent: a draw at depth `N+1` is the piecewise-constant refinement of
//! the draw at depth `N` whenever the randomness lives at a coarser base
//! depth, and the combs are defined pointwise.

use crate::dyadic::GridFunction;
use crate::scalar::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean-zero noise drawn once at `base_depth` and refined to `depth`.
pub fn refined_noise<T: Real, const D: usize>(
    depth: u32,
    base_depth: u32,
    seed: u64,
) -> GridFunction<T, D> {
    let base = base_depth.min(depth);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse = GridFunction::<T, D>::from_fn(base, |_| T::lit(rng.gen_range(-1.0..1.0)));
    let mean = coarse.integral();
    coarse.map(|v| v - mean).refine(depth)
}

/// Fine-scale noise at the grid resolution itself (not refinement
/// consistent; used where identities are checked per realization).
pub fn white_noise<T: Real, const D: usize>(depth: u32, seed: u64) -> GridFunction<T, D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GridFunction::from_fn(depth, |_| T::lit(rng.gen_range(-1.0..1.0)))
}

/// A lacunary comb: a signed sum of scale-`2^-k` square waves with slowly
/// decaying weights. Defined pointwise, hence refinement consistent.
pub fn lacunary_comb<T: Real, const D: usize>(depth: u32, scales: u32, seed: u64) -> GridFunction<T, D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signs: Vec<f64> =
        (0..scales).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    GridFunction::from_fn(depth, |x: &[T; D]| {
        let mut v = 0.0f64;
        for k in 1..=scales {
            let mut wave = 1.0f64;
            for x_i in x.iter().take(D) {
                let t = x_i.to_f64_lossy() * 2f64.powi(k as i32);
                wave *= if (t.floor() as i64) % 2 == 0 { 1.0 } else { -1.0 };
            }
            v += signs[(k - 1) as usize] * wave / k as f64;
        }
        T::lit(v)
    })
}

/// Alternating sample streams for pairing estimates: even indices are
/// refined noise, odd indices are lacunary combs, all normalized in `L^r`.
pub fn normalized_sample<T: Real, const D: usize>(
    depth: u32,
    r: f64,
    index: usize,
    seed: u64,
) -> GridFunction<T, D> {
    let raw = if index % 2 == 0 {
        refined_noise::<T, D>(depth, 6.min(depth), seed ^ (index as u64).wrapping_mul(0x9e37))
    } else {
        lacunary_comb::<T, D>(depth, depth.min(6), seed ^ (index as u64).wrapping_mul(0x85eb))
    };
    let norm = raw.lp_norm(T::lit(r));
    if norm == T::zero() {
        return raw;
    }
    raw.scale(T::one() / norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refined_noise_is_refinement_consistent() {
        let a = refined_noise::<f64, 1>(7, 5, 42);
        let b = refined_noise::<f64, 1>(8, 5, 42);
        assert_eq!(a.refine(8), b);
        assert!(a.integral().abs() < 1e-14);
    }

    #[test]
    fn combs_are_refinement_consistent_and_bounded() {
        let a = lacunary_comb::<f64, 1>(7, 5, 3);
        let b = lacunary_comb::<f64, 1>(9, 5, 3);
        assert_eq!(a.refine(9), b);
        let harmonic: f64 = (1..=5).map(|k| 1.0 / k as f64).sum();
        assert!(a.linf_norm() <= harmonic + 1e-12);
    }

    #[test]
    fn samples_are_normalized() {
        for idx in 0..6 {
            let f = normalized_sample::<f64, 1>(7, 4.0, idx, 11);
            assert!((f.lp_norm(4.0) - 1.0).abs() < 1e-12);
        }
    }
}
