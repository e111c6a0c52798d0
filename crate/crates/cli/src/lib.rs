//! Command-line pipeline around the `btc_anomaly` detectors.

pub mod config;
pub mod pipeline;
pub mod scatter;

pub use config::PipelineConfig;
pub use pipeline::{run_pipeline, RunReport, Stage, StageError};
