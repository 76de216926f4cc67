//! Experiment harness: configuration, toy datasets, the evaluation
//! pipeline, CSV reports and the self-test used by the CLI.

pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod selftest;

pub use config::{Config, RawConfig};
pub use error::{HarnessError, Result};
