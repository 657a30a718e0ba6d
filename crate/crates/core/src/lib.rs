//! Causal Process Model: an object-centric world model whose per-step
//! transition is a sparse causal graph between object and force nodes, with
//! graph edges chosen by two learned controllers.

pub mod config;
pub mod baselines;
pub mod cpm;
pub mod dataset;
pub mod encoders;
pub mod env;
pub mod error;
pub mod eval;
pub mod latent;
pub mod model;
pub mod training;
pub mod nn;
pub mod planner;
pub mod plot;

pub use error::{Error, Result};
