//! Command line and HTTP front ends for the diagnosis engine.

pub mod api;
pub mod artifacts;
pub mod cli;
pub mod error;

pub use error::CliError;
