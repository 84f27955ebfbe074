//! Numerical toolkit for mean field games with possibly degenerate,
//! control-dependent diffusion.
//!
//! The crate is organized around a forward-backward SDE view of the
//! problem:
//!
//! - [`measure`]: empirical measures with exact 2-Wasserstein distance;
//! - [`model`]: problem instances (coefficients, costs, derivatives,
//!   assumption constants) and assumption validators;
//! - [`hamiltonian`]: Lagrangian/Hamiltonian and the minimizing control map;
//! - [`lq`]: exact linear-quadratic oracle (Riccati ODE hierarchy);
//! - [`fbsde`]: least-squares Monte Carlo solvers for the control and
//!   equilibrium forward-backward systems;
//! - [`flows`]: linearized flows (Jacobians, directional and measure
//!   derivatives, Hessian flows) along a solved trajectory;
//! - [`value`]: assembly of the value functional and its derivatives, with
//!   master-equation and dynamic-programming diagnostics;
//! - [`cli`]: batch experiment driver behind the `mfg` binary.

pub mod cli;
pub mod error;
pub mod fbsde;
pub mod flows;
pub mod hamiltonian;
pub mod lq;
pub mod measure;
pub mod model;
pub mod value;

pub use error::{MfgError, Result};
