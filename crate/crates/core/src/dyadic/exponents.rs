//! Lebesgue exponent bookkeeping for the testing conditions.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// The exponent tuple used across the verifiers, all in `(1, inf)`.
/// Conjugates are derived on demand; `conj(x) = x / (x - 1)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExponentConfig {
    /// Size exponent of the primary test-function system.
    pub p: f64,
    /// Size exponent of the adjoint-side system.
    pub q: f64,
    /// Integrability of `T b` for the primary system.
    pub u: f64,
    /// Integrability of `T* b` for the adjoint-side system.
    pub v: f64,
    /// Embedding exponent for the Carleson checks, in `(1, 2]`.
    pub s: f64,
    /// Integrability carried by the suppressed-operator systems.
    pub t: f64,
    /// Final indicator-testing exponent.
    pub r: f64,
}

impl Default for ExponentConfig {
    fn default() -> Self {
        ExponentConfig { p: 1.5, q: 1.5, u: 1.5, v: 1.5, s: 1.5, t: 1.5, r: 2.0 }
    }
}

pub fn conjugate(x: f64) -> f64 {
    x / (x - 1.0)
}

impl ExponentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [
            ("p", self.p),
            ("q", self.q),
            ("u", self.u),
            ("v", self.v),
            ("s", self.s),
            ("t", self.t),
            ("r", self.r),
        ] {
            if !(x > 1.0 && x.is_finite()) {
                return Err(Error::ExponentRange {
                    context: format!("exponent {name} = {x} not in (1, inf)"),
                });
            }
            // Conjugate identity to machine precision.
            let c = conjugate(x);
            if (1.0 / x + 1.0 / c - 1.0).abs() > 1e-12 {
                return Err(Error::ExponentRange {
                    context: format!("conjugate identity failed for {name} = {x}"),
                });
            }
        }
        if !(self.s <= 2.0) {
            return Err(Error::ExponentRange {
                context: format!("embedding exponent s = {} must lie in (1, 2]", self.s),
            });
        }
        Ok(())
    }

    pub fn p_prime(&self) -> f64 {
        conjugate(self.p)
    }

    pub fn q_prime(&self) -> f64 {
        conjugate(self.q)
    }

    pub fn u_prime(&self) -> f64 {
        conjugate(self.u)
    }

    pub fn v_prime(&self) -> f64 {
        conjugate(self.v)
    }

    pub fn t_prime(&self) -> f64 {
        conjugate(self.t)
    }

    /// Pairing exponent for the reduced bilinear bound: any value strictly
    /// above `max(t', 2)` works; one unit of headroom keeps the duality
    /// exponents comfortably inside their ranges.
    pub fn baby_s_prime(&self) -> f64 {
        self.t_prime().max(2.0) + 1.0
    }

    /// Check that an `s'` choice is admissible for the reduced bound.
    pub fn check_baby_s_prime(&self, s_prime: f64) -> Result<()> {
        let floor = self.t_prime().max(2.0);
        if s_prime <= floor {
            return Err(Error::ExponentRange {
                context: format!("pairing exponent {s_prime} must exceed max(t', 2) = {floor}"),
            });
        }
        Ok(())
    }
}
