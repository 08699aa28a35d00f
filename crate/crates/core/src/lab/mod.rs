//! Experiment orchestration: configuration, decay scans, outputs and the
//! command-line front end.

pub mod cli;
pub mod config;
pub mod manifest;
pub mod output;
pub mod scan;

pub use config::ExperimentConfig;
pub use manifest::RunManifest;
pub use scan::{run_decay_scan, theorem_envelope, Centering, DecayPoint, DecayScanResult};
