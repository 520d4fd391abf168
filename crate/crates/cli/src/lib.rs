//! Command-line front end of the codec: training, meta-training, encoding
//! with online adaptation, decoding and RD evaluation.

pub mod commands;
pub mod config;
pub mod error;
pub mod image_io;

pub use commands::{run, Cli, Command};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
