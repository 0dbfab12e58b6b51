//! Bayesian meta-learning and Bayesian active meta-learning for few-pilot
//! demodulation and equalization over simulated fading channels.

pub mod active;
pub mod adaptation;
pub mod baselines;
pub mod channel;
pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod meta;
pub mod metrics;
pub mod models;
pub mod rng;

pub use error::{Error, Result};
