//! Cross-group causal influence maximization.
//!
//! The pipeline splits a network into a source group (where interventions
//! are applied) and a target group (where outcomes are measured), simulates
//! observational data from a structural causal model, fits a graph neural
//! estimator of the core-to-group effect (Co2G), and selects intervention
//! subsets under a budget.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod graph;
pub mod rng;
pub mod scm;
pub mod selectors;
pub mod textfmt;

pub use error::{Error, Result};
