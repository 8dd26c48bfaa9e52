//! The `trajforge` pipeline as a library: configuration plus one function
//! per subcommand.

pub mod commands;
pub mod config;

pub use config::RunConfig;
