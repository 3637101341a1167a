//! Multilevel delayed-acceptance MCMC for Darcy flow with SPDE Gaussian
//! random field priors and a surrogate-filtered coarsest level.

pub mod config;
pub mod darcy;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod grf;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod mcmc;
pub mod surrogate;

pub use error::{Error, Result};
