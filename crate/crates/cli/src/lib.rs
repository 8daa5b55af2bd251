//! Configuration, orchestration and artifact writing for the `cep` binary.

pub mod config;
pub mod error;
pub mod runs;

pub use config::{parse_config, ExperimentKind, RunConfig, Seeds};
pub use error::{CliError, CliResult};
