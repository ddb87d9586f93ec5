//! Pipeline driver for tweetlinks: configuration, stage artifacts and the
//! stage implementations behind the `tweetlinks` binary.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod stages;

pub use config::{Overrides, PipelineConfig};
pub use error::CliError;
pub use stages::{run_stage, RunOptions, Stage};
