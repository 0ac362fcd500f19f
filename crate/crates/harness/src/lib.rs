//! Runs and checks grafted backbones: config files, the planted-patch task,
//! a training loop, checkpoints and the verification suites behind the
//! `graft` command.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod optim;
pub mod suites;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{load_config, parse_config, resolve_seed, Precision, RunConfig};
pub use error::{HarnessError, Result};
pub use suites::{run_suite, Suite, SuiteReport};
pub use train::{train, train_paired, MetricRow, Paired, TrainOutcome};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/running.md")]
mod running {}
