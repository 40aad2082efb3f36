//! Command-line front end: configuration, cached tree builds and the
//! `grids`, `transitions`, `price`, `surface`, `converge` and `simulate`
//! commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
