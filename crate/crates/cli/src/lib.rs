//! Config-driven front end: parse a problem file, train, and write the
//! solution grid, loss history, report and parameter file.

pub mod config;
pub mod model_file;
pub mod run;

pub use config::{Issue, IssueKind, RunConfig};
pub use run::{prepare, run, timestep, validate, CliError, Overrides, RunSummary};
