//! Library side of the `neurograd` command: configuration, the commands
//! themselves, and the scenario runner.

pub mod app;
pub mod config;
pub mod data;
pub mod error;
pub mod run;
pub mod scenario;

pub use config::{DataSource, RunConfig};
pub use error::{CliError, Result};
