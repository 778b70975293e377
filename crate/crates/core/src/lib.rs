pub mod attack;
pub mod auxiliary;
pub mod baselines;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
