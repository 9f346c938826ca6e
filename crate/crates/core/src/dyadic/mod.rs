//! Dyadic geometry over the reference cube `[0,1)^D` and the
//! piecewise-constant function calculus at a fixed finite depth.

mod cube;
mod exponents;
mod grid;
mod maximal;

pub use cube::{ball_in_doubled_cube_constant, CubeIter, DyadicCube, GeomBox, MultiIndexIter};
pub use exponents::{conjugate, ExponentConfig};
pub use grid::{
    cell_center, cells_per_side, n_cells, padded_cells_per_side, padded_center, CubeSums,
    GridFunction, PaddedFunction, Region,
};
pub use maximal::{hardy_check, maximal_function, HardyReport};
