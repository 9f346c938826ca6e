//! Scalar abstraction: all grid values, kernel evaluations and measured
//! constants are generic over a floating-point type.

use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar for grid values and kernel evaluation: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Send + Sync + Debug + Display + 'static
{
    /// Convert an `f64` literal; panics only on NaN-free overflow, which the
    /// parameter ranges used here never hit.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable in scalar type")
    }

    /// Cardinalities (cell counts, sample counts) as a scalar.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count not representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + NumAssign + Sum + Send + Sync + Debug + Display + 'static
{
}

/// Euclidean distance squared between two points. Exact for dyadic-rational
/// coordinates at the depths used here.
pub fn dist2<T: Real, const D: usize>(x: &[T; D], y: &[T; D]) -> T {
    let mut s = T::zero();
    for i in 0..D {
        let d = x[i] - y[i];
        s += d * d;
    }
    s
}

/// Euclidean distance between two points.
pub fn dist<T: Real, const D: usize>(x: &[T; D], y: &[T; D]) -> T {
    dist2(x, y).sqrt()
}
