use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Balanced accuracy (mean per-class recall) and macro F1.
///
/// A class that never occurs in `labels` is skipped when it is also never
/// predicted; if it is predicted it contributes recall 0 and F1 0.
pub fn classification_metrics(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<ClassMetrics> {
    check_dim("metric inputs", labels.len(), predictions.len())?;
    if labels.is_empty() {
        return Err(Error::invalid("metrics need at least one sample"));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::invalid(format!(
                "class index out of range (pred {p}, label {y}, C={num_classes})"
            )));
        }
        confusion[y][p] += 1;
    }
    let mut recalls = Vec::new();
    let mut f1s = Vec::new();
    for c in 0..num_classes {
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let tp = confusion[c][c];
        if actual == 0 && predicted == 0 {
            continue;
        }
        let recall = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
        recalls.push(recall);
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (actual + predicted) as f64
        };
        f1s.push(f1);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(ClassMetrics {
        balanced_accuracy: mean(&recalls),
        macro_f1: mean(&f1s),
        confusion,
    })
}
