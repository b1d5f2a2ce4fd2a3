//! Configuration, artifacts and stage runners behind the `saap` binary.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod stages;

pub use config::{Overrides, Preset, RunConfig};
pub use error::{CliError, CliResult, EXIT_STAGE, EXIT_VALIDATION};
pub use stages::Run;
