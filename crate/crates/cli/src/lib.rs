//! Command-line front end: artifact container, run configuration and the
//! pipeline commands behind the `lensless` binary.

pub mod cli;
pub mod commands;
pub mod config;
pub mod container;
pub mod error;

pub use cli::{run, Cli, EXIT_NOT_CONVERGED};
pub use config::RunConfig;
pub use container::{ArrayContainer, Manifest, Semantic};
pub use error::{CliError, CliResult};
