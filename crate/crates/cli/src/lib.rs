//! Configuration-driven experiments on couplings of reflected Brownian
//! motion: ensemble simulation, certificate construction and independent
//! re-verification of serialized certificates.

pub mod certfile;
pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_certify, cmd_simulate, cmd_stats, cmd_verify};
pub use config::{ExperimentConfig, Overrides};
pub use error::{exit, CliError};
