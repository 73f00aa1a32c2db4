//! Harness around the usm-core backbone: CLI plumbing, synthetic datasets,
//! checkpoint persistence, metrics, image emission and the analytic cost
//! profiler.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod flops;
pub mod image;
pub mod metrics;
pub mod profile;
pub mod runner;

pub use error::{HarnessError, Result};
