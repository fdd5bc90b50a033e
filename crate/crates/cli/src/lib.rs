//! Command-line surface and gating proxy for `entgate`.

pub mod commands;
pub mod error;
pub mod gateway;

pub use commands::{run, Cli};
pub use error::CliError;
