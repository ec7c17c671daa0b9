//! Experiment orchestration: configuration, pipeline stages, run manifests,
//! CLI commands and report emission.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod svg;

pub use config::ExperimentConfig;
pub use manifest::RunManifest;
