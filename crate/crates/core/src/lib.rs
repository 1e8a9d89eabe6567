//! Estimation and diagnostics for softmax-gated Gaussian mixtures of experts.
//!
//! - [`model`]: measures, conditional densities, sampling, translations.
//! - [`estimator`]: maximum likelihood by EM with restarts.
//! - [`voronoi`]: Voronoi cells and the exact-/over-fitted losses.
//! - [`polysys`]: the polynomial system behind the over-fitted exponents.
//! - [`divergence`]: Hellinger and total-variation distances.
//! - [`experiments`]: Monte Carlo convergence-rate harness.
//! - [`io`], [`cli`]: file formats and the `softmoe` command.

pub mod cli;
pub mod divergence;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod io;
pub mod model;
pub mod polysys;
pub mod voronoi;

pub use error::{MoeError, Result};
