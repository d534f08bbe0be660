//! Hard-sphere dynamics, Boltzmann solvers and collision-tree expansions on the periodic box.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod badsets;
pub mod draw;
pub mod experiments;
pub mod initial_data;
pub mod observables;
pub mod seeding;
pub mod sim;
pub mod solver;
pub mod stats;
pub mod torus;
pub mod trees;
pub mod vector;

pub use sim::{Configuration, EventLog, SimError, Simulator};
pub use torus::{ParticleState, TorusError};
pub use vector::Vector;
