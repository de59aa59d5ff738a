//! Runners, property suites and artifact emission for the `softimit` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod svg;
pub mod verify;

pub use commands::{cmd_bandit, cmd_plot, cmd_tabular, cmd_verify, PlotKind, RunOptions};
pub use config::RunConfig;
pub use error::{CliError, Exit, Result};
pub use manifest::{Artifact, ExperimentManifest};
pub use verify::{PropertyCheck, Suite};
