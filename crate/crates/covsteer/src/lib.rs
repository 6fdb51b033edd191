//! Robust low-thrust interplanetary trajectory design by covariance
//! steering.
//!
//! The library plans a transfer as a Gaussian steering problem: given
//! boundary means and covariances for the spacecraft state (position,
//! velocity, and mass), it finds an affine feedback policy
//! u = F_k + K_k (x − x̄_k) that drives the mean along a minimum-fuel path
//! while keeping every node's covariance inside the terminal bound and the
//! thrust magnitude inside its chance constraint. The nonconvex couplings
//! (gravity, thrust-over-mass, mass-rate) are handled by sequential convex
//! programming over semidefinite subproblems; solutions are validated by
//! closed-loop Monte Carlo on the nonlinear stochastic dynamics.
//!
//! Workflow: [`scenario::Scenario`] describes the problem in physical
//! units → [`initializer::solve_reference`] produces the deterministic
//! minimum-fuel nominal → [`steering::scp_solve`] designs the stochastic
//! policy → [`montecarlo::simulate_closed_loop`] checks it by sampling →
//! [`artifacts`] writes the tables and figures.

// The semidefinite solver resolves its LAPACK symbols against the system
// BLAS; reference the provider crate so the linker keeps it.
extern crate openblas_src as _;

pub mod artifacts;
pub mod conic;
pub mod discretize;
pub mod dynamics;
pub mod error;
pub mod initializer;
pub mod montecarlo;
pub mod scale;
pub mod scenario;
pub mod stats;
pub mod steering;

pub use error::{Error, Result};
pub use initializer::{solve_reference, InitializerOptions};
pub use montecarlo::{simulate_closed_loop, PolicySchedule};
pub use scenario::Scenario;
pub use steering::{scp_solve, SolverConfig, SteeringSolution};
