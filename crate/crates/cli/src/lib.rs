//! Library surface of the command-line front end: configuration parsing and
//! the subcommand runners, kept callable for integration tests.

pub mod commands;
pub mod config;

pub use commands::exit_code;
pub use config::{parse_config, DataConfig, EvalConfig, RunConfig};
