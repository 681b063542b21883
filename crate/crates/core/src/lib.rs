//! Balanced semi-supervised GAN training lab.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod sampling;
pub mod trainer;

pub use config::{ExperimentConfig, Pipeline, SelectRule};
pub use error::{Error, Result};
