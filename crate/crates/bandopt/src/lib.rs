//! Optimal control band policies for a Brownian inventory model.
//!
//! The inventory level follows a (mu, sigma^2) Brownian motion between
//! interventions. A control band policy {d, D, U, u} pushes the level up to D
//! whenever it falls to d (paying K + k per unit moved) and down to U whenever
//! it rises to u (paying L + l per unit moved). Running inventory is charged a
//! convex holding cost rate h, discounted at rate beta.
//!
//! The crate solves for the cost-minimizing band via a nested, bracketed
//! root-finding scheme on the derivative g = V' of the candidate value
//! function, then certifies the result three independent ways: a
//! quasi-variational inequality check on the extended value function, a
//! brute-force grid search over bands using the closed-form policy cost, and
//! Monte Carlo simulation of the controlled process.
//!
//! Entry points: [`free_boundary::solve_optimal`] for the band,
//! [`value_function::policy_value`] / [`value_function::verify_qvi`] for
//! pricing and certification, [`policy_sim::simulate_policy`] and
//! [`policy_sim::grid_search_band`] for the independent checks, and the
//! `bandopt` binary for batch runs driven by a config file.

pub mod characteristic;
pub mod cli;
mod error;
pub mod free_boundary;
pub mod gfunction;
pub mod holding_cost;
mod numerics;
pub mod policy_sim;
pub mod value_function;

pub use error::Error;
pub use free_boundary::{solve_optimal, ControlBand, SolveReport, ToleranceSet};
pub use holding_cost::{HoldingCost, ModelParams, ValidationReport};
pub use value_function::{
    policy_value, verify_qvi, GridSpec, PolicyValue, ValueContext, VerificationReport,
};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
