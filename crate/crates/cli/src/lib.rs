//! The `ctxtrace` command line: configuration, stage commands, run manifests
//! and the invariant checker behind `ctxtrace validate`.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod validate;

pub use args::Cli;
pub use commands::run;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;
pub use validate::{validate_files, Violation};
