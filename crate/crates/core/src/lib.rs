//! Physics-enhanced state-space models for forecasting irregularly sampled
//! dynamical systems from partial knowledge.

pub mod autodiff;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod nn;
pub mod objective;
pub mod params;
pub mod ssm;
pub mod train;
pub mod unit;
pub mod vae;

pub use error::{Error, Result};
