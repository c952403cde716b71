//! Monte Carlo solvers for coupled systems of one-dimensional backward
//! stochastic differential equations (BSDEs) whose drivers split into a
//! Lipschitz vector coupling and a diagonal part that is quadratic in `z`
//! and singular (`~ 1/y`) as `y -> 0+`.
//!
//! The solver decouples the system by freezing the coupling argument at the
//! previous iterate, solving the resulting scalar BSDEs by least-squares
//! Monte Carlo regression, and iterating to a fixed point. Positivity of the
//! scalar solutions is preserved either through a logarithmic change of
//! variables or through explicit flooring.
//!
//! On top of the solver the crate ships:
//!
//! * empirical validators for the structural assumptions the solver relies
//!   on ([`model`]),
//! * a scenario engine for the driving Brownian motion and an independent
//!   continuous-time Markov chain ([`scenario`]),
//! * a-priori moment-bound checkers run against solved grids ([`estimates`]),
//! * a regime-switching power-utility investment application with
//!   statistical optimality verification ([`portfolio`]),
//! * closed-form and Runge-Kutta reference oracles for analytically
//!   reducible configurations ([`oracle`]).

pub mod error;
pub mod estimates;
pub mod model;
pub mod oracle;
pub mod picard;
pub mod portfolio;
pub mod regression;
pub mod scenario;
pub mod solver;

pub use error::{CoreError, Result};
