//! Batch experiment driver: configuration, execution, verification and
//! figures.

pub mod config;
pub mod render;
pub mod run;
pub mod verify;

pub use config::{ExperimentConfig, Method, StreamConfig, OUTPUT_ENV};
pub use render::{render_bound_figure, render_svg};
pub use run::{run_cell, run_experiment, CertificateFile, CellSummary, ExperimentReport, RunOptions};
pub use verify::{verify_certificate, VerifyOutcome};
