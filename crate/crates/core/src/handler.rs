//! Test-time label distribution handling: two-stage temperature scaling,
//! debiased target label estimation, alignment and self-ensembling, with an
//! online estimator carried across the stream.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::calibrator::{ShiftTrend, TemperatureModel};
use crate::error::{check_dim, Error, Result};
use crate::scalar::{argmax, normalize, softmax, tempered_softmax, top_two, Scalar};
use crate::source::LogitsBatch;
use crate::tabular::SourceStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandlerMode {
    #[default]
    Full,
    /// Marginal alignment `norm(p · p_t / p_s)` only, no temperatures.
    AlignOnly,
    /// Softmax of the source logits; the state is never touched.
    SourceOnly,
}

impl std::str::FromStr for HandlerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "align_only" => Ok(Self::AlignOnly),
            "source_only" => Ok(Self::SourceOnly),
            other => Err(Error::invalid(format!("unknown handler mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for HandlerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::AlignOnly => "align_only",
            Self::SourceOnly => "source_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandlerConfig {
    pub alpha: f64,
    pub q_low: f64,
    pub q_high: f64,
    pub mode: HandlerMode,
    /// Debias from `softmax(f / T_i)` instead of the uncalibrated softmax.
    /// Ablation only.
    pub debias_from_calibrated: bool,
}

impl Default for HandlerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            q_low: 0.25,
            q_high: 0.75,
            mode: HandlerMode::Full,
            debias_from_calibrated: false,
        }
    }
}

impl HandlerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(0.0 <= self.q_low && self.q_low < self.q_high && self.q_high <= 1.0) {
            return Err(Error::invalid(format!(
                "quantiles must satisfy 0 <= q_low < q_high <= 1, got {} and {}",
                self.q_low, self.q_high
            )));
        }
        Ok(())
    }
}

/// Online target label estimate carried between batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandlerState<S> {
    pub p_oe: Vec<S>,
    pub batch_index: usize,
}

impl<S: Scalar> HandlerState<S> {
    pub fn uniform(num_classes: usize) -> Self {
        let c = S::from_usize_lossy(num_classes);
        Self {
            p_oe: vec![S::one() / c; num_classes],
            batch_index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedBatch<S> {
    pub batch_index: usize,
    pub row_ids: Vec<usize>,
    /// Final probabilities p̄, `N × C`.
    pub probs: Array2<S>,
    pub stage1_temperatures: Vec<S>,
    pub uncertainties: Vec<S>,
    pub stage2_temperatures: Vec<S>,
    /// Estimated target label distribution used for alignment.
    pub target_dist: Vec<S>,
    /// Per-sample debiased estimates, `N × C`.
    pub debiased: Array2<S>,
    pub predictions: Vec<usize>,
}

/// `1.5ρ / (ρ − 1 + 1e-6)`.
pub fn base_temperature(imbalance_ratio: f64) -> f64 {
    if imbalance_ratio < 1.0 + 1e-9 {
        log::warn!(
            "source imbalance ratio {imbalance_ratio} is ~1; base temperature becomes very large"
        );
    }
    1.5 * imbalance_ratio / (imbalance_ratio - 1.0 + 1e-6)
}

/// Reciprocal margin between the two largest entries of `softmax(logits / T)`.
///
/// The top two classes are taken from the raw logits (lowest index on ties).
pub fn margin_uncertainty<S: Scalar>(logits: &[S], temperature: S) -> S {
    let (first, second) = top_two(logits);
    let p = tempered_softmax(logits, temperature);
    S::one() / (p[first] - p[second]).max(S::lit(S::DENOM_FLOOR))
}

/// Linear-interpolation quantile, `h = q·(n − 1)`.
pub fn quantile<S: Scalar>(values: &[S], q: f64) -> Result<S> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty list"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level {q} outside [0, 1]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("quantile input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = S::lit(h - lo as f64);
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// `T` for uncertainty at or above the upper quantile, `1/T` at or below the
/// lower one, 1 otherwise. The upper branch wins when both hold.
pub fn stage_two_temperature<S: Scalar>(
    uncertainties: &[S],
    temperature: S,
    q_low: f64,
    q_high: f64,
) -> Result<Vec<S>> {
    let high = quantile(uncertainties, q_high)?;
    let low = quantile(uncertainties, q_low)?;
    Ok(uncertainties
        .iter()
        .map(|&d| {
            if d >= high {
                temperature
            } else if d <= low {
                S::one() / temperature
            } else {
                S::one()
            }
        })
        .collect())
}

/// `norm(p / p_s)`.
pub fn debias_prediction<S: Scalar>(probs: &[S], source_dist: &[S]) -> Vec<S> {
    let ratio: Vec<S> = probs
        .iter()
        .zip(source_dist)
        .map(|(&p, &s)| p / s.floored())
        .collect();
    normalize(&ratio)
}

/// `(1 − α)·mean_i p^de_i + α·p_oe`.
pub fn estimate_target_distribution<S: Scalar>(
    debiased: &Array2<S>,
    state: &HandlerState<S>,
    alpha: f64,
) -> Result<Vec<S>> {
    blend_with_state(debiased, &state.p_oe, alpha)
}

fn blend_with_state<S: Scalar>(rows: &Array2<S>, p_oe: &[S], alpha: f64) -> Result<Vec<S>> {
    if rows.nrows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    check_dim("online estimate classes", rows.ncols(), p_oe.len())?;
    let n = S::from_usize_lossy(rows.nrows());
    let a = S::lit(alpha);
    Ok(rows
        .columns()
        .into_iter()
        .zip(p_oe)
        .map(|(col, &prev)| (S::one() - a) * col.sum() / n + a * prev)
        .collect())
}

/// `norm(p · p_t / p_s)`.
pub fn align_distribution_baseline<S: Scalar>(probs: &[S], target_dist: &[S], source_dist: &[S]) -> Vec<S> {
    let aligned: Vec<S> = probs
        .iter()
        .zip(target_dist)
        .zip(source_dist)
        .map(|((&p, &t), &s)| p * t / s.floored())
        .collect();
    normalize(&aligned)
}

/// `(p̃ + norm(p̃ · p_t / p_s)) / 2` with `p̃ = softmax(logits / T̃)`.
pub fn ensemble_prediction<S: Scalar>(
    logits: &[S],
    temperature: S,
    target_dist: &[S],
    source_dist: &[S],
) -> Vec<S> {
    let p = tempered_softmax(logits, temperature);
    let aligned = align_distribution_baseline(&p, target_dist, source_dist);
    let half = S::lit(0.5);
    p.iter().zip(&aligned).map(|(&a, &b)| (a + b) * half).collect()
}

/// `p_oe ← (1 − α)·mean_i p̄_i + α·p_oe`.
pub fn update_online_estimator<S: Scalar>(
    state: &HandlerState<S>,
    probs: &Array2<S>,
    alpha: f64,
) -> Result<HandlerState<S>> {
    Ok(HandlerState {
        p_oe: blend_with_state(probs, &state.p_oe, alpha)?,
        batch_index: state.batch_index + 1,
    })
}

fn rows_to_array<S: Scalar>(rows: Vec<Vec<S>>, num_classes: usize) -> Array2<S> {
    let n = rows.len();
    Array2::from_shape_vec((n, num_classes), rows.into_iter().flatten().collect())
        .expect("rows have C entries")
}

/// Runs the handler on one batch and returns the adapted batch with the next
/// state. The input state is not modified.
pub fn adapt_batch<S: Scalar, M: TemperatureModel<S> + ?Sized>(
    logits: &LogitsBatch<S>,
    trend: &ShiftTrend<S>,
    calibrator: &M,
    stats: &SourceStats,
    config: &HandlerConfig,
    state: &HandlerState<S>,
) -> Result<(AdaptedBatch<S>, HandlerState<S>)> {
    config.validate()?;
    let c = logits.num_classes();
    let n = logits.len();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if c < 2 {
        return Err(Error::invalid("handler needs at least two classes"));
    }
    check_dim("source label distribution", c, stats.num_classes())?;
    check_dim("online estimate classes", c, state.p_oe.len())?;
    let p_s = stats.label_dist_as::<S>();
    let rows: Vec<&[S]> = logits
        .logits
        .outer_iter()
        .map(|r| r.to_slice().expect("contiguous row"))
        .collect();
    let uncalibrated: Vec<Vec<S>> = rows.iter().map(|r| softmax(r)).collect();

    let (probs, stage1, deltas, stage2, target_dist, debiased, next) = match config.mode {
        HandlerMode::SourceOnly => {
            let ones = vec![S::one(); n];
            let deltas = rows.iter().map(|r| margin_uncertainty(r, S::one())).collect();
            let probs = rows_to_array(uncalibrated, c);
            (
                probs.clone(),
                ones.clone(),
                deltas,
                ones,
                state.p_oe.clone(),
                probs,
                state.clone(),
            )
        }
        HandlerMode::AlignOnly => {
            let ones = vec![S::one(); n];
            let deltas = rows.iter().map(|r| margin_uncertainty(r, S::one())).collect();
            let debiased = rows_to_array(
                uncalibrated.iter().map(|p| debias_prediction(p, &p_s)).collect(),
                c,
            );
            let p_t = estimate_target_distribution(&debiased, state, config.alpha)?;
            let probs = rows_to_array(
                uncalibrated
                    .iter()
                    .map(|p| align_distribution_baseline(p, &p_t, &p_s))
                    .collect(),
                c,
            );
            let next = update_online_estimator(state, &probs, config.alpha)?;
            (probs, ones.clone(), deltas, ones, p_t, debiased, next)
        }
        HandlerMode::Full => {
            let stage1 = calibrator.temperatures(logits, trend)?;
            check_dim("stage-one temperatures", n, stage1.len())?;
            if stage1.iter().any(|t| !(*t > S::zero()) || !t.is_finite()) {
                return Err(Error::NonFinite("stage-one temperatures".into()));
            }
            let deltas: Vec<S> = rows
                .iter()
                .zip(&stage1)
                .map(|(r, &t)| margin_uncertainty(r, t))
                .collect();
            let debias_source: Vec<Vec<S>> = if config.debias_from_calibrated {
                rows.iter()
                    .zip(&stage1)
                    .map(|(r, &t)| tempered_softmax(r, t))
                    .collect()
            } else {
                uncalibrated
            };
            let debiased = rows_to_array(
                debias_source.iter().map(|p| debias_prediction(p, &p_s)).collect(),
                c,
            );
            let p_t = estimate_target_distribution(&debiased, state, config.alpha)?;
            let base = S::lit(base_temperature(stats.imbalance_ratio));
            let stage2 = stage_two_temperature(&deltas, base, config.q_low, config.q_high)?;
            let probs = rows_to_array(
                rows.iter()
                    .zip(&stage2)
                    .map(|(r, &t)| ensemble_prediction(r, t, &p_t, &p_s))
                    .collect(),
                c,
            );
            let next = update_online_estimator(state, &probs, config.alpha)?;
            (probs, stage1, deltas, stage2, p_t, debiased, next)
        }
    };
    if probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("adapted probabilities".into()));
    }
    let predictions = probs
        .outer_iter()
        .map(|r| argmax(r.as_slice().expect("contiguous row")))
        .collect();
    Ok((
        AdaptedBatch {
            batch_index: state.batch_index,
            row_ids: logits.row_ids.clone(),
            probs,
            stage1_temperatures: stage1,
            uncertainties: deltas,
            stage2_temperatures: stage2,
            target_dist,
            debiased,
            predictions,
        },
        next,
    ))
}

/// Writes one CSV row per sample: batch_index, sample_id, T_i, δ_i, T̃_i,
/// p̄_1..C, predicted_class.
pub fn write_trace<S: Scalar, W: Write>(writer: W, batches: &[AdaptedBatch<S>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let c = batches.first().map_or(0, |b| b.probs.ncols());
    let mut header = vec![
        "batch_index".to_string(),
        "sample_id".into(),
        "T_i".into(),
        "delta_i".into(),
        "T_tilde_i".into(),
    ];
    header.extend((1..=c).map(|j| format!("p_bar_{j}")));
    header.push("predicted_class".into());
    out.write_record(&header)?;
    for b in batches {
        for (k, row) in b.probs.outer_iter().enumerate() {
            let mut rec = vec![
                b.batch_index.to_string(),
                b.row_ids[k].to_string(),
                b.stage1_temperatures[k].to_string(),
                b.uncertainties[k].to_string(),
                b.stage2_temperatures[k].to_string(),
            ];
            rec.extend(row.iter().map(|v| v.to_string()));
            // classes are reported 1-based, matching the label files
            rec.push((b.predictions[k] + 1).to_string());
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::calibrator::{ConstantTemperature, TrendGroup};
    use crate::tabular::ColumnKind;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn stats(dist: Vec<f64>) -> SourceStats {
        let ratio = dist.iter().copied().fold(f64::MIN, f64::max)
            / dist.iter().copied().fold(f64::MAX, f64::min);
        SourceStats {
            column_means: vec![0.0],
            label_dist: dist,
            imbalance_ratio: ratio,
        }
    }

    fn trend(n: usize) -> ShiftTrend<f64> {
        ShiftTrend {
            groups: vec![TrendGroup {
                column: 0,
                kind: ColumnKind::Numerical,
                values: Array2::zeros((n, 1)),
            }],
        }
    }

    #[test]
    fn base_temperature_examples() {
        assert_abs_diff_eq!(base_temperature(10.0), 15.0 / (9.0 + 1e-6), epsilon = 1e-12);
        assert_abs_diff_eq!(base_temperature(10.0), 1.6667, epsilon = 1e-4);
        assert_abs_diff_eq!(base_temperature(4.0), 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(base_temperature(1.0), 1.5e6, epsilon = 1e-3);
    }

    #[test]
    fn margin_examples() {
        let z = [4f64.ln(), 0.0];
        assert_abs_diff_eq!(margin_uncertainty(&z, 1.0), 1.0 / 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(margin_uncertainty(&z, 2.0), 3.0, epsilon = 1e-12);
        assert_eq!(margin_uncertainty(&[0.3, 0.3, 0.3], 1.0), 1e12);
    }

    #[test]
    fn quantile_examples() {
        assert_abs_diff_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.25).unwrap(), 1.75);
        assert_eq!(quantile(&[3.0, -1.0, 8.0], 0.0).unwrap(), -1.0);
        assert_eq!(quantile(&[5.0], 0.7).unwrap(), 5.0);
        assert!(quantile::<f64>(&[], 0.5).is_err());
    }

    #[test]
    fn stage_two_examples() {
        let t = stage_two_temperature(&[1.0, 2.0, 3.0, 4.0], 2.0, 0.25, 0.75).unwrap();
        assert_eq!(t, vec![0.5, 1.0, 1.0, 2.0]);
        let t = stage_two_temperature(&[7.0; 5], 2.0, 0.25, 0.75).unwrap();
        assert_eq!(t, vec![2.0; 5]);
        let t = stage_two_temperature(&[1.0, 9.0], 3.0, 0.25, 0.75).unwrap();
        assert_eq!(t, vec![1.0 / 3.0, 3.0]);
    }

    #[test]
    fn quantile_bands_match_definition() {
        for n in [4usize, 8, 64] {
            // distinct values in scrambled order
            let deltas: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 37) % n) as f64).collect();
            let t = stage_two_temperature(&deltas, 2.0, 0.25, 0.75).unwrap();
            let mut sorted = deltas.clone();
            sorted.sort_by(f64::total_cmp);
            let interp = |q: f64| {
                let h = q * (n - 1) as f64;
                let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
                sorted[lo] + (sorted[hi] - sorted[lo]) * (h - lo as f64)
            };
            let (low, high) = (interp(0.25), interp(0.75));
            let expect_high = deltas.iter().filter(|&&d| d >= high).count();
            let expect_low = deltas.iter().filter(|&&d| d <= low && d < high).count();
            assert_eq!(t.iter().filter(|&&v| v == 2.0).count(), expect_high);
            assert_eq!(t.iter().filter(|&&v| v == 0.5).count(), expect_low);
            assert_eq!(t.iter().filter(|&&v| v == 1.0).count(), n - expect_high - expect_low);
            // with h = q(n-1) non-integer for these n, each outer band has
            // floor(q(n-1)) + 1 members
            let k = (0.25 * (n - 1) as f64).floor() as usize + 1;
            assert_eq!(expect_low, k);
            assert_eq!(expect_high, k);
        }
    }

    #[test]
    fn debias_examples() {
        let d = debias_prediction(&[0.6, 0.4], &[0.8, 0.2]);
        assert_abs_diff_eq!(d[0], 0.75 / 2.75, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 2.0 / 2.75, epsilon = 1e-12);
        assert_eq!(debias_prediction(&[0.3, 0.7], &[0.5, 0.5]), vec![0.3, 0.7]);
        assert_eq!(debias_prediction(&[0.0, 1.0, 0.0], &[0.2, 0.3, 0.5]), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn target_estimate_examples() {
        let rows = array![[0.8, 0.2], [0.6, 0.4]];
        let state = HandlerState { p_oe: vec![0.5, 0.5], batch_index: 0 };
        let p = estimate_target_distribution(&rows, &state, 0.1).unwrap();
        assert_abs_diff_eq!(p[0], 0.68, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.32, epsilon = 1e-12);
        let p = estimate_target_distribution(&rows, &state, 0.0).unwrap();
        assert_abs_diff_eq!(p[0], 0.7, epsilon = 1e-12);
        let p = estimate_target_distribution(&rows, &state, 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn ensemble_examples() {
        let z = [0.4, -1.3, 2.0];
        let p = ensemble_prediction(&z, 1.0, &[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]);
        for (a, b) in p.iter().zip(softmax(&z)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        // ratio p_t / p_s = [2, 0.5]
        let p = ensemble_prediction(&[0.0, 0.0], 1.0, &[0.8, 0.2], &[0.4, 0.4]);
        assert_abs_diff_eq!(p[0], 0.65, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.35, epsilon = 1e-12);
        let p = ensemble_prediction(&[1000.0, 0.0], 1.0, &[0.1, 0.9], &[0.5, 0.5]);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn online_update_examples() {
        let state = HandlerState { p_oe: vec![0.5, 0.5], batch_index: 3 };
        let rows = array![[0.9, 0.1], [0.9, 0.1]];
        let next = update_online_estimator(&state, &rows, 0.1).unwrap();
        assert_abs_diff_eq!(next.p_oe[0], 0.86, epsilon = 1e-12);
        assert_abs_diff_eq!(next.p_oe[1], 0.14, epsilon = 1e-12);
        assert_eq!(next.batch_index, 4);
        assert_eq!(update_online_estimator(&state, &rows, 1.0).unwrap().p_oe, state.p_oe);
        let mut s = state;
        let mut gap = 0.4;
        for _ in 0..5 {
            s = update_online_estimator(&s, &rows, 0.3).unwrap();
            gap *= 0.3;
            assert_abs_diff_eq!(0.9 - s.p_oe[0], gap, epsilon = 1e-12);
        }
    }

    #[test]
    fn align_examples() {
        let a = align_distribution_baseline(&[0.3, 0.7], &[0.6, 0.4], &[0.6, 0.4]);
        assert_abs_diff_eq!(a[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(a[1], 0.7, epsilon = 1e-15);
        let a = align_distribution_baseline(&[0.5, 0.5], &[0.75, 0.25], &[0.5, 0.5]);
        assert_abs_diff_eq!(a[0], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn source_only_is_passthrough() {
        let z = LogitsBatch::new(array![[1.0, 0.0], [0.0, 3.0]], vec![10, 11]).unwrap();
        let state = HandlerState { p_oe: vec![0.3, 0.7], batch_index: 2 };
        let cfg = HandlerConfig { mode: HandlerMode::SourceOnly, ..Default::default() };
        let (out, next) =
            adapt_batch(&z, &trend(2), &ConstantTemperature(1.0), &stats(vec![0.8, 0.2]), &cfg, &state).unwrap();
        assert_eq!(next, state);
        for (row, logits) in out.probs.outer_iter().zip(z.logits.outer_iter()) {
            assert_eq!(row.to_vec(), softmax(logits.as_slice().unwrap()));
        }
        assert_eq!(out.predictions, vec![0, 1]);
    }

    #[test]
    fn full_mode_middle_band_matches_formula() {
        // four samples with distinct margins; the middle two fall strictly
        // between the quantile thresholds, so they keep temperature 1
        let z = LogitsBatch::new(
            array![[3.0, 0.0], [1.2, 0.0], [0.0, 0.6], [0.1, 0.0]],
            vec![0, 1, 2, 3],
        )
        .unwrap();
        let st = stats(vec![0.5, 0.5]);
        let state = HandlerState::uniform(2);
        let cfg = HandlerConfig { alpha: 0.3, ..Default::default() };
        let (out, next) = adapt_batch(&z, &trend(4), &ConstantTemperature(1.0), &st, &cfg, &state).unwrap();
        assert_eq!(out.stage2_temperatures[1], 1.0);
        assert_eq!(out.stage2_temperatures[2], 1.0);
        let probs: Vec<Vec<f64>> = z.logits.outer_iter().map(|r| softmax(r.as_slice().unwrap())).collect();
        let mean: Vec<f64> = (0..2).map(|j| probs.iter().map(|p| p[j]).sum::<f64>() / 4.0).collect();
        let p_t: Vec<f64> = (0..2).map(|j| 0.7 * mean[j] + 0.3 * 0.5).collect();
        for i in [1, 2] {
            let p = &probs[i];
            let un: Vec<f64> = (0..2).map(|j| p[j] * p_t[j] / 0.5).collect();
            let s: f64 = un.iter().sum();
            for j in 0..2 {
                let expected = (p[j] + un[j] / s) / 2.0;
                assert_abs_diff_eq!(out.probs[[i, j]], expected, epsilon = 1e-12);
            }
        }
        let mean_bar: Vec<f64> = (0..2).map(|j| out.probs.column(j).sum() / 4.0).collect();
        for j in 0..2 {
            assert_abs_diff_eq!(next.p_oe[j], 0.7 * mean_bar[j] + 0.3 * 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_batches_follow_geometric_recursion() {
        let z = LogitsBatch::new(array![[2.0, 0.0, -1.0], [0.5, 0.2, 0.1]], vec![0, 1]).unwrap();
        let st = stats(vec![0.2, 0.3, 0.5]);
        let cfg = HandlerConfig { alpha: 0.2, mode: HandlerMode::AlignOnly, ..Default::default() };
        let mut state = HandlerState::uniform(3);
        let mut p_oe = vec![1.0 / 3.0; 3];
        for _ in 0..6 {
            let (_, next) = adapt_batch(&z, &trend(2), &ConstantTemperature(1.0), &st, &cfg, &state).unwrap();
            // oracle: straight-line recomputation of the align-only step
            let probs: Vec<Vec<f64>> = z.logits.outer_iter().map(|r| softmax(r.as_slice().unwrap())).collect();
            let deb: Vec<Vec<f64>> = probs
                .iter()
                .map(|p| {
                    let u: Vec<f64> = (0..3).map(|j| p[j] / st.label_dist[j]).collect();
                    let s: f64 = u.iter().sum();
                    u.iter().map(|v| v / s).collect()
                })
                .collect();
            let p_t: Vec<f64> = (0..3)
                .map(|j| 0.8 * (deb[0][j] + deb[1][j]) / 2.0 + 0.2 * p_oe[j])
                .collect();
            let aligned: Vec<Vec<f64>> = probs
                .iter()
                .map(|p| {
                    let u: Vec<f64> = (0..3).map(|j| p[j] * p_t[j] / st.label_dist[j]).collect();
                    let s: f64 = u.iter().sum();
                    u.iter().map(|v| v / s).collect()
                })
                .collect();
            p_oe = (0..3)
                .map(|j| 0.8 * (aligned[0][j] + aligned[1][j]) / 2.0 + 0.2 * p_oe[j])
                .collect();
            for j in 0..3 {
                assert_abs_diff_eq!(next.p_oe[j], p_oe[j], epsilon = 1e-12);
            }
            state = next;
        }
        assert_eq!(state.batch_index, 6);
    }

    #[test]
    fn trace_has_expected_columns() {
        let z = LogitsBatch::new(array![[1.0, 0.0], [0.0, 3.0]], vec![4, 9]).unwrap();
        let (out, _) = adapt_batch(
            &z,
            &trend(2),
            &ConstantTemperature(1.0),
            &stats(vec![0.6, 0.4]),
            &HandlerConfig::default(),
            &HandlerState::uniform(2),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &[out]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "batch_index,sample_id,T_i,delta_i,T_tilde_i,p_bar_1,p_bar_2,predicted_class"
        );
        assert!(lines.next().unwrap().starts_with("0,4,1,"));
        assert_eq!(lines.count(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(HandlerConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(HandlerConfig { q_low: 0.8, ..Default::default() }.validate().is_err());
        assert!(HandlerConfig::default().validate().is_ok());
        assert_eq!("align_only".parse::<HandlerMode>().unwrap(), HandlerMode::AlignOnly);
    }

    proptest! {
        #[test]
        fn outputs_are_simplices(
            logits in proptest::collection::vec(-30.0f64..30.0, 3 * 7),
            ps in proptest::collection::vec(0.05f64..1.0, 3),
            temp in 0.06f64..5.0,
            alpha in 0.0f64..1.0,
        ) {
            let z = LogitsBatch::new(Array2::from_shape_vec((7, 3), logits).unwrap(), (0..7).collect()).unwrap();
            let sum: f64 = ps.iter().sum();
            let st = stats(ps.iter().map(|p| p / sum).collect());
            let cfg = HandlerConfig { alpha, ..Default::default() };
            let state = HandlerState::uniform(3);
            let (out, next) = adapt_batch(&z, &trend(7), &ConstantTemperature(temp), &st, &cfg, &state).unwrap();
            for row in out.probs.outer_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
            prop_assert!((next.p_oe.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(out.uncertainties.iter().all(|&d| d >= 1.0));
            prop_assert!(out.stage2_temperatures.iter().all(|&t| t > 0.0));
            // determinism
            let (again, _) = adapt_batch(&z, &trend(7), &ConstantTemperature(temp), &st, &cfg, &state).unwrap();
            prop_assert_eq!(again, out);
        }

        #[test]
        fn scaling_logits_keeps_tempered_argmax(
            row in proptest::collection::vec(-10.0f64..10.0, 4),
            c in 0.01f64..50.0,
            t in 0.05f64..10.0,
        ) {
            let scaled: Vec<f64> = row.iter().map(|v| v * c).collect();
            prop_assert_eq!(argmax(&tempered_softmax(&row, t)), argmax(&tempered_softmax(&scaled, t)));
        }
    }
}
