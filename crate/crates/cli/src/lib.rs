//! Reproducible runs over the nucleo-core models: synthetic data, patch
//! stores, training, evaluation, prediction and the gradient self test.

pub mod config;
pub mod error;
pub mod eval;
pub mod infer;
pub mod predict;
pub mod selftest;
pub mod store;
pub mod synth;
pub mod train;

pub use config::{ConfigOverlay, RunConfig};
pub use error::{CliError, CliResult};
