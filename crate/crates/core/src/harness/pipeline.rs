use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde_json::json;

use super::config::{RunConfig, ShiftConfig};
use super::report::{BatchRecord, ModeRun, RunReport};
use crate::calibrator::{compute_shift_trend, post_train_calibrator, CalibrationHistory, Calibrator, TemperatureModel};
use crate::error::{Error, Result};
use crate::handler::{adapt_batch, AdaptedBatch, HandlerConfig, HandlerState};
use crate::metrics::{classification_metrics, js_divergence, mmd_rbf, reliability_from_probs, DEFAULT_ECE_BINS};
use crate::nn::TrainConfig;
use crate::scalar::{argmax, softmax};
use crate::shift::{
    apply_corruption, generate_synthetic_dataset, sample_label_shifted_stream, write_with_provenance,
    CorruptionTally, SyntheticSpec,
};
use crate::source::{train_source_classifier, LogitsBatch, SourceModel, TrainHistory};
use crate::tabular::{
    BatchOrder, Dataset, Preprocessor, Role, Schema, SourceStats,
};

/// Source and labeled target datasets for one repetition.
pub fn prepare_data(cfg: &RunConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    if let Some(spec) = &d.synthetic {
        let spec = SyntheticSpec {
            seed: spec.seed.wrapping_add(seed),
            ..spec.clone()
        };
        return generate_synthetic_dataset(&spec);
    }
    match (&d.schema, &d.source_csv, &d.target_csv) {
        (Some(schema), Some(src), Some(tgt)) => {
            let schema = Schema::from_json_file(schema)?;
            let source = Dataset::from_csv(src, &schema, Role::Source)?;
            let target = Dataset::from_csv(tgt, &schema, Role::Target)?;
            Ok((source, target))
        }
        _ => Err(Error::invalid("config names neither data files nor a synthetic spec")),
    }
}

/// Everything fitted on the source set.
#[derive(Debug, Clone)]
pub struct FittedModels {
    pub model: SourceModel<f64>,
    pub stats: SourceStats,
    pub calibrator: Calibrator<f64>,
    pub source_history: TrainHistory,
    pub calibration_history: CalibrationHistory,
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: cfg.seed.wrapping_add(seed),
        ..cfg.clone()
    }
}

/// Trains the classifier, then post-trains the calibrator with it frozen.
pub fn fit_models(source: &Dataset, cfg: &RunConfig, seed: u64) -> Result<FittedModels> {
    let pre = Preprocessor::fit(source).map_err(|e| e.in_stage("train"))?;
    let stats = SourceStats::compute(source, &pre).map_err(|e| e.in_stage("train"))?;
    let (model, source_history) =
        train_source_classifier::<f64>(source, &pre, &with_seed(&cfg.source_train, seed), &cfg.classifier)
            .map_err(|e| e.in_stage("train"))?;
    let (calibrator, calibration_history) = post_train_calibrator(
        source,
        &model,
        &stats,
        &with_seed(&cfg.calibrator_train, seed),
        &cfg.calibrator,
    )
    .map_err(|e| e.in_stage("calibrate"))?;
    Ok(FittedModels {
        model,
        stats,
        calibrator,
        source_history,
        calibration_history,
    })
}

/// A materialized test stream: rows already in stream order.
#[derive(Debug, Clone)]
pub struct ShiftedStream {
    pub name: String,
    pub dataset: Dataset,
    pub tally: Option<CorruptionTally>,
    pub provenance: serde_json::Value,
}

/// Applies the corruption, then orders rows by the label-shift sampler.
pub fn build_stream(
    target: &Dataset,
    source: &Dataset,
    stats: &SourceStats,
    shift: &ShiftConfig,
    seed: u64,
) -> Result<ShiftedStream> {
    let mut data = target.clone();
    let mut tally = None;
    let corruption = shift.corruption.map(|c| crate::shift::CorruptionSpec {
        seed: c.seed.wrapping_add(seed),
        ..c
    });
    if let Some(spec) = &corruption {
        let out = apply_corruption(&data, source, spec)?;
        data = out.dataset;
        tally = Some(out.tally);
    }
    let label_shift = shift.label_shift.map(|l| crate::shift::LabelShiftSpec {
        seed: l.seed.wrapping_add(seed),
        ..l
    });
    if let Some(spec) = &label_shift {
        let stream = sample_label_shifted_stream(&data, stats, spec)?;
        data = data.select_rows(&stream.rows)?;
    }
    let provenance = json!({
        "shift": shift.display_name(),
        "corruption": corruption,
        "label_shift": label_shift,
        "tally": tally,
        "repetition_seed": seed,
    });
    Ok(ShiftedStream {
        name: shift.display_name(),
        dataset: data,
        tally,
        provenance,
    })
}

/// Runs the handler over a stream in `given` order, one batch at a time.
pub fn adapt_stream<M: TemperatureModel<f64> + ?Sized>(
    encoded: &Array2<f64>,
    logits: &LogitsBatch<f64>,
    stats: &SourceStats,
    groups: &[crate::tabular::EncodedGroup],
    calibrator: &M,
    handler: &HandlerConfig,
    batch_size: usize,
) -> Result<Vec<AdaptedBatch<f64>>> {
    let mut state = HandlerState::<f64>::uniform(logits.num_classes());
    let mut out = Vec::new();
    for positions in crate::tabular::batch_indices(logits.len(), batch_size, BatchOrder::Given)? {
        let x = encoded.select(Axis(0), &positions);
        let trend = compute_shift_trend(x.view(), groups, &stats.column_means)?;
        let (adapted, next) = adapt_batch(&logits.select(&positions), &trend, calibrator, stats, handler, &state)?;
        state = next;
        out.push(adapted);
    }
    Ok(out)
}

/// Metrics of one adapted stream against its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamScore {
    pub metrics: BTreeMap<String, f64>,
    pub batches: Vec<BatchRecord>,
}

fn frequencies(labels: impl Iterator<Item = usize>, c: usize) -> Vec<f64> {
    let mut counts = vec![0.0; c];
    let mut n = 0.0;
    for y in labels {
        counts[y] += 1.0;
        n += 1.0;
    }
    counts.iter().map(|k| k / n).collect()
}

/// Scores adapted batches. `logits` are the unadapted source logits of the
/// same rows, used for the pseudo-label baseline of the JS diagnostic.
pub fn score_stream(batches: &[AdaptedBatch<f64>], logits: &LogitsBatch<f64>, labels: &[usize]) -> Result<StreamScore> {
    let c = logits.num_classes();
    let mut predictions = Vec::with_capacity(labels.len());
    let mut true_labels = Vec::with_capacity(labels.len());
    let mut prob_rows = Vec::with_capacity(labels.len() * c);
    let mut records = Vec::with_capacity(batches.len());
    let mut offset = 0;
    for b in batches {
        let n = b.row_ids.len();
        let batch_labels: Vec<usize> = b.row_ids.iter().map(|&r| labels[r]).collect();
        let truth = frequencies(batch_labels.iter().copied(), c);
        let pseudo = frequencies(
            b.row_ids.iter().map(|&r| argmax(&softmax(logits.logits.row(r).as_slice().expect("contiguous")))),
            c,
        );
        records.push(BatchRecord {
            batch_index: b.batch_index,
            size: n,
            js_handler: js_divergence(&b.target_dist, &truth),
            js_pseudo_label: js_divergence(&pseudo, &truth),
            mean_temperature: b.stage1_temperatures.iter().sum::<f64>() / n as f64,
            mean_stage2_temperature: b.stage2_temperatures.iter().sum::<f64>() / n as f64,
            accuracy: b.predictions.iter().zip(&batch_labels).filter(|(p, y)| p == y).count() as f64 / n as f64,
        });
        predictions.extend(&b.predictions);
        true_labels.extend(batch_labels);
        prob_rows.extend(b.probs.iter().copied());
        offset += n;
    }
    let probs = Array2::from_shape_vec((offset, c), prob_rows).expect("rows of C");
    let class = classification_metrics(&predictions, &true_labels, c)?;
    let ece = reliability_from_probs(probs.view(), &true_labels, DEFAULT_ECE_BINS)?.ece;
    let mean = |f: fn(&BatchRecord) -> f64| records.iter().map(f).sum::<f64>() / records.len() as f64;
    let metrics = BTreeMap::from([
        ("balanced_accuracy".to_string(), class.balanced_accuracy),
        ("macro_f1".to_string(), class.macro_f1),
        ("ece".to_string(), ece),
        ("js_handler".to_string(), mean(|r| r.js_handler)),
        ("js_pseudo_label".to_string(), mean(|r| r.js_pseudo_label)),
        ("mean_temperature".to_string(), mean(|r| r.mean_temperature)),
        ("mean_stage2_temperature".to_string(), mean(|r| r.mean_stage2_temperature)),
    ]);
    Ok(StreamScore { metrics, batches: records })
}

fn strided(m: &Array2<f64>, max_rows: usize) -> Array2<f64> {
    let stride = m.nrows().div_ceil(max_rows).max(1);
    let idx: Vec<usize> = (0..m.nrows()).step_by(stride).collect();
    m.select(Axis(0), &idx)
}

fn seed_dir(out: Option<&Path>, seed: u64) -> Option<PathBuf> {
    out.map(|o| o.join(format!("seed_{seed}")))
}

/// Runs every (seed, shift, mode) combination. Artifacts go under `out_dir`
/// when given; the returned report is not written here.
pub fn run_pipeline(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let mut report = RunReport::new(cfg)?;
    for &seed in &cfg.seeds {
        let dir = seed_dir(out_dir, seed);
        if let Some(d) = &dir {
            std::fs::create_dir_all(d.join("streams"))?;
            std::fs::create_dir_all(d.join("traces"))?;
        }
        let (source, target) = prepare_data(cfg, seed).map_err(|e| e.in_stage("load"))?;
        target.require_labels("scoring").map_err(|e| e.in_stage("load"))?;
        let fitted = fit_models(&source, cfg, seed)?;
        if let Some(d) = &dir {
            fitted.model.save(d.join("source_model.bin"), seed).map_err(|e| e.in_stage("train"))?;
            fitted.calibrator.save(d.join("calibrator.bin"), seed).map_err(|e| e.in_stage("calibrate"))?;
            let f = std::fs::File::create(d.join("source_stats.json"))?;
            serde_json::to_writer_pretty(f, &fitted.stats)?;
        }
        report.record_training(seed, &fitted);
        let pre = fitted.model.preprocessor();
        let groups = pre.groups();
        let source_encoded = pre.apply(&source)?.matrix;

        for shift in &cfg.shifts {
            let stream = build_stream(&target, &source, &fitted.stats, shift, seed).map_err(|e| e.in_stage("simulate"))?;
            if let Some(d) = &dir {
                write_with_provenance(&stream.dataset, d.join("streams").join(format!("{}.csv", stream.name)), &stream.provenance)
                    .map_err(|e| e.in_stage("simulate"))?;
            }
            let encoded = pre.apply(&stream.dataset).map_err(|e| e.in_stage("adapt"))?.matrix;
            let logits = fitted.model.predict_encoded(encoded.view()).map_err(|e| e.in_stage("adapt"))?;
            let logits = LogitsBatch::new(logits, (0..stream.dataset.len()).collect())?;
            let labels = stream.dataset.require_labels("scoring")?;
            let mmd = mmd_rbf(
                strided(&source_encoded, cfg.mmd_max_rows).view(),
                strided(&encoded, cfg.mmd_max_rows).view(),
            )
            .map_err(|e| e.in_stage("evaluate"))?;
            report.record_shift_metric(&stream.name, "mmd", seed, mmd);

            for &mode in &cfg.modes {
                let handler = HandlerConfig { mode, ..cfg.handler };
                let batches = adapt_stream(
                    &encoded,
                    &logits,
                    &fitted.stats,
                    &groups,
                    &fitted.calibrator,
                    &handler,
                    cfg.batch_size,
                )
                .map_err(|e| e.in_stage("adapt"))?;
                let score = score_stream(&batches, &logits, labels).map_err(|e| e.in_stage("evaluate"))?;
                if let (Some(d), true) = (&dir, cfg.sample_traces) {
                    let f = std::fs::File::create(d.join("traces").join(format!("{}__{}.csv", stream.name, mode)))?;
                    crate::handler::write_trace(std::io::BufWriter::new(f), &batches)
                        .map_err(|e| e.in_stage("adapt"))?;
                }
                report.record_mode(ModeRun {
                    seed,
                    shift: stream.name.clone(),
                    mode,
                    metrics: score.metrics,
                    batches: score.batches,
                });
            }
        }
    }
    report.finish();
    Ok(report)
}
