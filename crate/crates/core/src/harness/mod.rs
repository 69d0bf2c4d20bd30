//! Config-driven runs: train, post-train the calibrator, build shifted
//! streams, adapt batch by batch and aggregate metrics over seeds.

mod config;
mod pipeline;
mod report;

pub use config::{DataConfig, RunConfig, ShiftConfig, CONFIG_SCHEMA_VERSION, OUT_DIR_ENV};
pub use pipeline::{
    adapt_stream, build_stream, fit_models, prepare_data, run_pipeline, score_stream, FittedModels,
    ShiftedStream, StreamScore,
};
pub use report::{
    write_report, BatchRecord, MetricSummary, ModeRun, RunReport, ShiftBlock, SUMMARY_FILE,
};
