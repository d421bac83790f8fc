//! Equilibrium computation and Monte Carlo verification for a two-investor
//! mean-variance Stackelberg game in which the leader knows the stock's drift
//! and the follower filters it from prices.
//!
//! The crate is organised bottom-up:
//!
//! * [`market_model`]: constants and the filter coefficients.
//! * [`pde_solver`]: the four backward Cauchy problems.
//! * [`strategies`]: the follower's response and the leader's Gaussian policy.
//! * [`simulator`]: sampled and exploratory wealth dynamics.
//! * [`objectives`]: Monte Carlo mean-variance objectives and closed-form values.
//! * [`verify`]: perturbation, convergence and certificate checks.
//! * [`cli`]: the configuration-driven experiment runner.

pub mod cli;
pub mod error;
pub mod market_model;
pub mod objectives;
pub mod pde_solver;
pub mod rng;
pub mod simulator;
pub mod strategies;
pub mod verify;

pub use error::{Error, Result};
pub use market_model::{DerivedConstants, Investor, ModelParams};
pub use pde_solver::{EquilibriumSurfaces, PdeGridSpec, Scheme, SurfaceKind, ValueSurface};

/// Formats with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
