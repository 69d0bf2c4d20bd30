use ndarray::Axis;

use super::model::{Calibrator, CalibratorSpec};
use super::trend::compute_shift_trend;
use crate::error::{Error, Result};
use crate::nn::{Optimizer, TrainConfig};
use crate::scalar::Scalar;
use crate::source::{LogitsBatch, SourceModel};
use crate::tabular::{batch_indices, BatchOrder, Dataset, SourceStats};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationHistory {
    /// Mean focal + λ·calibration loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Fits the calibrator on source batches with the classifier frozen.
pub fn post_train_calibrator<S: Scalar>(
    source: &Dataset,
    model: &SourceModel<S>,
    stats: &SourceStats,
    cfg: &TrainConfig,
    spec: &CalibratorSpec,
) -> Result<(Calibrator<S>, CalibrationHistory)> {
    cfg.validate()?;
    let labels = source.require_labels("calibrator training")?;
    let pre = model.preprocessor();
    let encoded = pre.apply(source)?.matrix.mapv(S::lit);
    let logits = model.predict_encoded(encoded.view())?;
    let groups = pre.groups();
    let mut calibrator = Calibrator::new(groups.clone(), model.num_classes(), spec.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(cfg);

    let mut history = CalibrationHistory::default();
    for epoch in 0..cfg.epochs {
        let batches = batch_indices(
            source.len(),
            cfg.batch_size.max(2),
            BatchOrder::Shuffled {
                seed: cfg.seed.wrapping_add(1 + epoch as u64),
            },
        )?;
        let mut loss_sum = 0.0;
        for batch in batches {
            let x = encoded.select(Axis(0), &batch);
            let trend = compute_shift_trend(x.view(), &groups, &stats.column_means)?;
            let z = LogitsBatch::new(logits.select(Axis(0), &batch), batch.clone())?;
            let batch_labels: Vec<usize> = batch.iter().map(|&r| labels[r]).collect();
            let (loss, grads) = calibrator.loss_and_gradients(&z, &trend, &batch_labels).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFinite(format!("calibrator loss at epoch {epoch}")),
                other => other,
            })?;
            loss_sum += loss.as_f64() * batch.len() as f64;
            let slices: Vec<&[S]> = grads.iter().map(Vec::as_slice).collect();
            opt.step(&mut calibrator, &slices)?;
        }
        let mean = loss_sum / source.len() as f64;
        log::debug!("calibrator epoch {epoch}: loss {mean:.6}");
        history.epoch_losses.push(mean);
    }
    Ok((calibrator, history))
}
