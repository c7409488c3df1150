//! Config-driven experiment runner, reports, comparisons and plots.

pub mod config;
pub mod error;
pub mod plot;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, Task};
pub use error::{CliError, CliResult};
pub use report::{compare, Comparison, RunReport};
pub use runner::run;
