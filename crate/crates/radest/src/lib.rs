//! Joint probability density estimation from 1-D random-projection sketches.
//!
//! The density of an `N`-dimensional random vector is modelled as a low-rank
//! mixture of product densities (a CPD / naive-Bayes model) whose conditional
//! factors are convex combinations of fixed 1-D dictionary atoms. Fitting
//! targets are concatenated histograms of random 1-D projections of every
//! feature pair, which need far fewer samples than 2-D histograms.
//!
//! Main entry points:
//! - [`rad::fit`] — the RAD estimator (sketches, SPA initialization,
//!   alternating refinement, projected-gradient polish).
//! - [`baselines`] — the 2-D-histogram dictionary baseline and EM-fitted
//!   Gaussian mixtures.
//! - [`evaluation`] — Monte Carlo KLD/JSD between any two fitted models.
//! - [`experiment`] — a seeded synthetic sweep harness producing CSV results.

pub mod baselines;
pub mod dictionary;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod rad;
pub mod rng;
pub mod simplex;
pub mod sketch;
pub mod spa;

pub use error::{Error, Result};
