//! Boltzmann-equation solvers: a discrete-velocity solver for spatially uniform data, run in
//! either time direction, and a stochastic particle solver on the torus.
//!
//! Only the grid solver handles the reverse equation. A particle method realizes the collision
//! operator as a jump process, and a jump process cannot carry the negative sign.

pub mod collision;
pub mod dsmc;
pub mod grid;
pub mod homogeneous;
pub mod lanford;

pub use collision::{collision_operator, Quadrature, SphereQuadrature};
pub use grid::{Interpolant, Moments, VelocityGrid};
pub use homogeneous::{solve_homogeneous, HomogeneousState, SolveOptions, SolverError, TimeDirection, Trajectory};
pub use lanford::{lanford_time, LanfordBound};
