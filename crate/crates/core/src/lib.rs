pub mod baselines;
pub mod bias_sim;
pub mod context;
pub mod dataset;
pub mod dual_tower;
pub mod error;
pub mod layer;
pub mod metrics;
pub mod optim;
pub mod persist;
pub mod training;

pub use error::{Error, Result};
