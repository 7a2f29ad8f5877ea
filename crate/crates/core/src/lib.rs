//! Coupled-mode statistics for slab waveguides with random perturbations:
//! guided modes, limiting coupling coefficients, moment equations, decay rates
//! and their expansions, the continuum limit, and Monte Carlo estimators.

pub mod continuum;
pub mod coupling;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod mode_solver;
pub mod moments;
mod par;
pub mod quadrature;
pub mod spectral;
pub mod stochastic;

pub use error::{Error, Result};
