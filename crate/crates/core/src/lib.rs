//! Causal world-model lab: simulators, latent world-model backbones, a
//! DAG-constrained structural branch, staged training and retrieval
//! evaluation under do-interventions.

pub mod archive;
pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod causal;
pub mod env;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
