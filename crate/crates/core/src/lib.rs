//! A desk-scale laboratory for dyadic singular-integral calculus.
//!
//! The crate models functions as piecewise-constant grids on the unit cube,
//! applies Calderon-Zygmund kernels by midpoint quadrature, and builds the
//! machinery that local testing-condition arguments run on: accretive test
//! function systems, maximal truncations, suppressed kernels, stopping-time
//! forests, adapted martingale differences, and the bilinear-form
//! decomposition into disjoint / nested / paraproduct / diagonal parts.
//!
//! Every analytic inequality the machinery relies on has a numerical
//! verifier that measures its constant on the grid; the `pipeline` module
//! chains the verifiers end to end and reports depth-stability of each
//! measured constant.
//!
//! Core types are generic over the scalar (`f32` or `f64`, via the [`Real`]
//! trait) and over the dimension `D` (1 or 2). Concrete `f64` aliases live
//! at the crate root.

pub mod accretive;
pub mod bilinear;
pub mod config;
pub mod dyadic;
pub mod error;
pub mod kernels;
pub mod martingale;
pub mod operators;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod stopping;
pub mod testfns;

pub use error::{Error, Result};
pub use scalar::Real;

/// Dyadic cube of the unit interval.
pub type Cube1 = dyadic::DyadicCube<1>;
/// Dyadic square of the unit square.
pub type Cube2 = dyadic::DyadicCube<2>;
/// Piecewise-constant function on the unit interval, `f64` values.
pub type GridFunction1 = dyadic::GridFunction<f64, 1>;
/// Piecewise-constant function on the unit square, `f64` values.
pub type GridFunction2 = dyadic::GridFunction<f64, 2>;
/// Kernel on the unit interval, `f64` values.
pub type Kernel1 = kernels::CZKernel<f64, 1>;
/// Kernel on the unit square, `f64` values.
pub type Kernel2 = kernels::CZKernel<f64, 2>;
/// Discrete operator in dimension one, `f64` values.
pub type Operator1 = operators::DiscreteOperator<f64, 1>;
/// Discrete operator in dimension two, `f64` values.
pub type Operator2 = operators::DiscreteOperator<f64, 2>;
/// Accretive system in dimension one, `f64` values.
pub type System1 = accretive::AccretiveSystem<f64, 1>;
/// Accretive system in dimension two, `f64` values.
pub type System2 = accretive::AccretiveSystem<f64, 2>;
