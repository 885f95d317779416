//! Gaussian latent martingale models for probability forecast paths.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod covariance;
pub mod error;
pub mod gaussian;
pub mod fitted;
pub mod glim;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod path;
pub mod seed;
pub mod synth;

pub use error::{GlimError, Result};
