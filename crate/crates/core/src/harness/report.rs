use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::pipeline::FittedModels;
use crate::error::{Error, Result};
use crate::handler::HandlerMode;

pub const SUMMARY_FILE: &str = "summary.json";
const BATCH_FILE: &str = "batch_metrics.csv";
const PROVENANCE_FILE: &str = "provenance.json";

/// Per-seed values with their mean and standard error (sample std / √n).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Self { values, mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub size: usize,
    /// JS divergence (nats) of the handler's estimate from the batch's true
    /// label frequencies.
    pub js_handler: f64,
    /// Same, for the frequencies of the unadapted argmax predictions.
    pub js_pseudo_label: f64,
    pub mean_temperature: f64,
    pub mean_stage2_temperature: f64,
    pub accuracy: f64,
}

/// Scores of one (seed, shift, mode) run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeRun {
    pub seed: u64,
    pub shift: String,
    pub mode: HandlerMode,
    pub metrics: BTreeMap<String, f64>,
    pub batches: Vec<BatchRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftBlock {
    /// Stream diagnostics shared by all modes (e.g. MMD to the source).
    pub stream: BTreeMap<String, MetricSummary>,
    pub modes: BTreeMap<String, BTreeMap<String, MetricSummary>>,
    /// Per-seed `mode − source_only` differences.
    pub differences: BTreeMap<String, MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub package_version: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub training: BTreeMap<String, MetricSummary>,
    pub shifts: BTreeMap<String, ShiftBlock>,
    #[serde(skip)]
    pub runs: Vec<ModeRun>,
    #[serde(skip)]
    config: Option<RunConfig>,
    #[serde(skip)]
    raw_training: BTreeMap<String, Vec<f64>>,
    #[serde(skip)]
    raw_stream: BTreeMap<(String, String), Vec<f64>>,
}

fn hashed_config(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        out_dir: None,
        ..cfg.clone()
    }
}

impl RunReport {
    pub(crate) fn new(cfg: &RunConfig) -> Result<Self> {
        let cfg = hashed_config(cfg);
        Ok(Self {
            schema_version: cfg.schema_version,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: cfg.sha256()?,
            seeds: cfg.seeds.clone(),
            training: BTreeMap::new(),
            shifts: BTreeMap::new(),
            runs: Vec::new(),
            config: Some(cfg),
            raw_training: BTreeMap::new(),
            raw_stream: BTreeMap::new(),
        })
    }

    pub(crate) fn record_training(&mut self, _seed: u64, fitted: &FittedModels) {
        let mut push = |k: &str, v: f64| self.raw_training.entry(k.to_string()).or_default().push(v);
        let h = &fitted.source_history;
        push("source_validation_macro_f1", h.validation_macro_f1.get(h.best_epoch).copied().unwrap_or(f64::NAN));
        push("source_final_loss", h.epoch_losses.last().copied().unwrap_or(f64::NAN));
        let c = &fitted.calibration_history.epoch_losses;
        push("calibrator_first_loss", c.first().copied().unwrap_or(f64::NAN));
        push("calibrator_final_loss", c.last().copied().unwrap_or(f64::NAN));
        push("source_imbalance_ratio", fitted.stats.imbalance_ratio);
    }

    pub(crate) fn record_shift_metric(&mut self, shift: &str, metric: &str, _seed: u64, value: f64) {
        self.raw_stream
            .entry((shift.to_string(), metric.to_string()))
            .or_default()
            .push(value);
    }

    pub(crate) fn record_mode(&mut self, run: ModeRun) {
        self.runs.push(run);
    }

    /// Aggregates the recorded runs into summary blocks.
    pub(crate) fn finish(&mut self) {
        self.training = self
            .raw_training
            .iter()
            .map(|(k, v)| (k.clone(), MetricSummary::from_values(v.clone())))
            .collect();
        let mut shifts: BTreeMap<String, ShiftBlock> = BTreeMap::new();
        for ((shift, metric), values) in &self.raw_stream {
            shifts
                .entry(shift.clone())
                .or_default()
                .stream
                .insert(metric.clone(), MetricSummary::from_values(values.clone()));
        }
        let mut per_mode: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
        for run in &self.runs {
            for (metric, &v) in &run.metrics {
                per_mode
                    .entry((run.shift.clone(), run.mode.to_string(), metric.clone()))
                    .or_default()
                    .push(v);
            }
        }
        for ((shift, mode, metric), values) in &per_mode {
            shifts
                .entry(shift.clone())
                .or_default()
                .modes
                .entry(mode.clone())
                .or_default()
                .insert(metric.clone(), MetricSummary::from_values(values.clone()));
        }
        let baseline = HandlerMode::SourceOnly.to_string();
        for ((shift, mode, metric), values) in &per_mode {
            if *mode == baseline || !["macro_f1", "balanced_accuracy", "ece"].contains(&metric.as_str()) {
                continue;
            }
            if let Some(base) = per_mode.get(&(shift.clone(), baseline.clone(), metric.clone())) {
                let diffs = values.iter().zip(base).map(|(a, b)| a - b).collect();
                shifts
                    .get_mut(shift)
                    .expect("block exists")
                    .differences
                    .insert(format!("{mode}_minus_{baseline}.{metric}"), MetricSummary::from_values(diffs));
            }
        }
        self.shifts = shifts;
    }

    /// Mean of a mode metric, if recorded.
    pub fn mean(&self, shift: &str, mode: HandlerMode, metric: &str) -> Option<f64> {
        Some(self.shifts.get(shift)?.modes.get(&mode.to_string())?.get(metric)?.mean)
    }

    pub fn summary_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }
}

/// Writes `summary.json`, `batch_metrics.csv` and `provenance.json`.
pub fn write_report(report: &RunReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if report.shifts.values().all(|b| b.modes.is_empty()) {
        return Err(Error::invalid("report holds no metrics"));
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(SUMMARY_FILE), report.summary_json()?)?;

    let mut csv = csv::Writer::from_path(dir.join(BATCH_FILE))?;
    csv.write_record([
        "seed",
        "shift",
        "mode",
        "batch_index",
        "size",
        "js_handler",
        "js_pseudo_label",
        "mean_temperature",
        "mean_stage2_temperature",
        "accuracy",
    ])?;
    for run in &report.runs {
        for b in &run.batches {
            csv.write_record([
                run.seed.to_string(),
                run.shift.clone(),
                run.mode.to_string(),
                b.batch_index.to_string(),
                b.size.to_string(),
                b.js_handler.to_string(),
                b.js_pseudo_label.to_string(),
                b.mean_temperature.to_string(),
                b.mean_stage2_temperature.to_string(),
                b.accuracy.to_string(),
            ])?;
        }
    }
    csv.flush()?;

    let provenance = serde_json::json!({
        "config_sha256": report.config_sha256,
        "seeds": report.seeds,
        "package": env!("CARGO_PKG_NAME"),
        "package_version": report.package_version,
        "js_divergence_unit": "nats",
        "ece_bins": crate::metrics::DEFAULT_ECE_BINS,
        "config": report.config,
    });
    std::fs::write(dir.join(PROVENANCE_FILE), serde_json::to_string_pretty(&provenance)? + "\n")?;
    Ok(())
}
