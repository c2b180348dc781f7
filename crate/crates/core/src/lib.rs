//! Mean-field games and mean-field-type control with several populations.
//!
//! The crate computes equilibria by fixed-point iteration on measure flows
//! over adjoint FBSDE solvers, and checks finite-agent approximation
//! properties (propagation of chaos, approximate Nash equilibria) by
//! simulation.

pub mod cli;
pub mod fbsde;
pub mod fixedpoint;
pub mod hamiltonian;
pub mod measures;
pub mod model;
pub mod nagent;
pub mod rng;
