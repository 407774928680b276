//! Files, reports and the `tima` command-line pipeline around `tima-core`.
//!
//! - [`config`]: the `key = value` run configuration.
//! - [`formats`]: binary checkpoints and datasets.
//! - [`report`]: JSON evaluation reports.
//! - [`export`]: similarity matrices as CSV and PGM.
//! - [`pipeline`]: data generation, pretraining, fine-tuning, evaluation and
//!   sweeps under one output directory.

pub mod config;
pub mod export;
pub mod formats;
pub mod pipeline;
pub mod report;

pub use config::{parse_config, ConfigError, ConfigErrorKind, PixelFraction, RunConfig};
pub use pipeline::Pipeline;
pub use report::{EvalReport, ReportError};
