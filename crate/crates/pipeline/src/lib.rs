//! Orchestration of the two-phase stepping pipeline: configuration, the
//! artifact manifest, the subcommands behind the `stepmap` binary and the
//! map renderer.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod render;

pub use config::PipelineConfig;
pub use error::{PipelineError, Result};
