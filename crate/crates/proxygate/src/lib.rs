//! File formats, run configuration and command implementations for the
//! `proxygate` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod genspec;
pub mod pool;
pub mod precise;

pub use commands::{cmd_check, cmd_eval, cmd_preset, cmd_sweep, cmd_train, RunManifest};
pub use config::{Run, RunConfig};
pub use error::{CliError, Result};
pub use pool::Workers;
