//! Run configuration and pipeline orchestration for the maskopt workspace.

pub mod config;
pub mod pipeline;

pub use config::RunConfig;
pub use pipeline::{RunPaths, StageSet};
