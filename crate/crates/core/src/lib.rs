//! Numerical laboratory for quantitative stochastic homogenization on periodic
//! lattices.
//!
//! The crate builds the higher-order corrector hierarchy (correctors, flux
//! correctors and effective coefficients) for coefficient fields drawn from a
//! stationary Gaussian ensemble, evaluates the standard homogenization
//! commutator, assembles the functional derivative of commutator averages, and
//! runs Monte Carlo scans of their decorrelation.
//!
//! Module map:
//!
//! * [`grid`]: torus lattice, fields, forward/backward differences, FFT.
//! * [`ensemble`]: spectral Gaussian sampling and the coefficient map.
//! * [`elliptic`]: divergence-form solver and spectral Poisson solver.
//! * [`correctors`]: corrector hierarchy, identity checks, moment scans.
//! * [`commutator`]: higher-order and standard commutators.
//! * [`sensitivity`]: test functions, functional derivatives, decay of the
//!   auxiliary solution, covariance-estimate right-hand side.
//! * [`lab`]: experiment configuration, decay scans, CLI plumbing.

pub mod commutator;
pub mod correctors;
pub mod elliptic;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod lab;
pub mod par;
pub mod sensitivity;
pub mod stats;

pub use error::{Error, Result};
