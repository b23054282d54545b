//! Experiment runner for EM distillation: `distill`, `sample`, `eval` and
//! `verify`.

pub mod commands;
pub mod config;
pub mod error;
pub mod verify;

pub use commands::{cmd_distill, cmd_eval, cmd_sample, DistillSummary};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use verify::{cmd_verify, VerifyReport};
