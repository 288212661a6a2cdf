pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod render;

pub use cli::main_with;
pub use error::{CliError, CliResult};
