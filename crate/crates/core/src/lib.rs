//! Univariate density estimation on `[0, 1]` with L1-penalized log-splines.
//!
//! The log-density is modelled as `f(x) = Σ β_j φ_j(x)` over a truncated
//! power basis and normalized through `p(x) = exp(f(x)) / C(β)`. Penalizing
//! `‖β‖₁` bounds the k-th order variation of `f`, so the estimator adapts to
//! local smoothness while the data-adaptive knots keep the working model
//! rich enough to approximate any bounded-variation log-density.
//!
//! On top of the fitted density the crate provides:
//!
//! * four solvers for the penalized likelihood ([`solvers`]),
//! * cross-validated tuning of the penalty and basis order ([`selection`]),
//! * pointwise delta-method confidence bands ([`inference`]),
//! * plug-in and targeted estimation of moments, survival probabilities and
//!   quantiles with influence-curve standard errors ([`targeting`]),
//! * an ADMM trend-filtering estimator on a uniform grid ([`trend`]),
//! * six reference data-generating processes ([`dgp`]) and a Monte Carlo
//!   driver for coverage and convergence studies ([`sim`]).

pub mod basis;
pub mod dgp;
mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod seeds;
pub mod selection;
pub mod sim;
pub mod solvers;
pub mod targeting;
pub mod trend;

pub use basis::{BasisSpec, DesignMatrix};
pub use error::{Error, Result};
pub use model::{DataSummary, FittedDensity, LogSplineModel, Penalty, QuadratureGrid};
pub use solvers::{Algorithm, SolverConfig, SolverTrace};
