use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::{argmax, Scalar};

pub const DEFAULT_ECE_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
}

/// Equal-width reliability bins over `[0, 1]` and the count-weighted gap
/// between accuracy and confidence. Confidence 1.0 falls in the last bin.
pub fn expected_calibration_error<S: Scalar>(
    confidences: &[S],
    correct: &[bool],
    num_bins: usize,
) -> Result<ReliabilityReport> {
    check_dim("calibration inputs", confidences.len(), correct.len())?;
    if num_bins == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    let mut sums = vec![(0usize, 0.0f64, 0usize); num_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let c = c.as_f64();
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * num_bins as f64) as usize).min(num_bins - 1);
        sums[b].0 += 1;
        sums[b].1 += c;
        sums[b].2 += usize::from(ok);
    }
    let n = confidences.len().max(1) as f64;
    let mut ece = 0.0;
    let bins = sums
        .into_iter()
        .enumerate()
        .map(|(b, (count, conf_sum, hits))| {
            let (mean_confidence, accuracy) = if count == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum / count as f64, hits as f64 / count as f64)
            };
            ece += count as f64 / n * (accuracy - mean_confidence).abs();
            ReliabilityBin {
                lower: b as f64 / num_bins as f64,
                upper: (b + 1) as f64 / num_bins as f64,
                count,
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(ReliabilityReport { bins, ece })
}

/// Reliability of top-class predictions for a probability matrix.
pub fn reliability_from_probs<S: Scalar>(
    probs: ArrayView2<S>,
    labels: &[usize],
    num_bins: usize,
) -> Result<ReliabilityReport> {
    check_dim("calibration labels", probs.nrows(), labels.len())?;
    let mut conf = Vec::with_capacity(labels.len());
    let mut correct = Vec::with_capacity(labels.len());
    for (row, &y) in probs.outer_iter().zip(labels) {
        let row = row.to_vec();
        let j = argmax(&row);
        conf.push(row[j].min(S::one()));
        correct.push(j == y);
    }
    expected_calibration_error(&conf, &correct, num_bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrated_confidences_have_zero_ece() {
        let conf = vec![0.75_f64; 8];
        let correct = [true, true, true, false, true, true, true, false];
        let r = expected_calibration_error(&conf, &correct, 15).unwrap();
        assert!(r.ece.abs() < 1e-15);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 8);
    }

    #[test]
    fn single_bin_gap() {
        let conf = vec![0.9_f64; 4];
        let correct = [true, false, true, false];
        let r = expected_calibration_error(&conf, &correct, 1).unwrap();
        assert!((r.ece - 0.4).abs() < 1e-12);
    }

    #[test]
    fn two_equal_bins() {
        // bin [0,0.5): conf 0.4 acc 0.5 (gap 0.1); bin [0.5,1]: conf 0.8 acc 0.5 (gap 0.3)
        let conf = [0.4_f64, 0.4, 0.8, 0.8];
        let correct = [true, false, true, false];
        let r = expected_calibration_error(&conf, &correct, 2).unwrap();
        assert!((r.ece - 0.2).abs() < 1e-12);
    }

    #[test]
    fn replacing_confidence_by_bin_accuracy_zeroes_ece() {
        let conf = [0.93_f64, 0.91, 0.55, 0.52, 0.31];
        let correct = [true, false, true, true, false];
        let r = expected_calibration_error(&conf, &correct, 10).unwrap();
        assert!(r.ece > 0.0);
        let fixed: Vec<f64> = conf
            .iter()
            .map(|&c| {
                let b = &r.bins[((c * 10.0) as usize).min(9)];
                // keep the value inside the same bin
                b.accuracy.clamp(b.lower, b.upper - 1e-9)
            })
            .collect();
        let again = expected_calibration_error(&fixed, &correct, 10).unwrap();
        assert!(again.ece <= r.ece);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(expected_calibration_error(&[1.5_f64], &[true], 15).is_err());
    }
}
