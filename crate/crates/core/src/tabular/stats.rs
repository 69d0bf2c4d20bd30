use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::preprocess::Preprocessor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Source-domain quantities the adaptation stage needs at test time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    /// Mean of every encoded column over the source set.
    pub column_means: Vec<f64>,
    /// Empirical source label distribution p_s(y).
    pub label_dist: Vec<f64>,
    /// max_j p_s(y)_j / min_j p_s(y)_j.
    pub imbalance_ratio: f64,
}

impl SourceStats {
    pub fn compute(source: &Dataset, pre: &Preprocessor) -> Result<Self> {
        let labels = source.require_labels("source statistics")?;
        let label_dist = label_distribution(labels, source.num_classes())?;
        let encoded = pre.apply(source)?.matrix;
        let n = encoded.nrows() as f64;
        let column_means = encoded.columns().into_iter().map(|c| c.sum() / n).collect();
        Ok(Self {
            column_means,
            imbalance_ratio: imbalance_ratio(&label_dist),
            label_dist,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label_dist.len()
    }

    pub fn label_dist_as<S: Scalar>(&self) -> Vec<S> {
        self.label_dist.iter().map(|&p| S::lit(p)).collect()
    }
}

/// Class frequencies; errors if any class is absent.
pub(crate) fn label_distribution(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class: class + 1 });
    }
    let n = labels.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

pub(crate) fn imbalance_ratio(dist: &[f64]) -> f64 {
    let max = dist.iter().copied().fold(f64::MIN, f64::max);
    let min = dist.iter().copied().fold(f64::MAX, f64::min);
    max / min
}

#[cfg(test)]
mod tests {
    use super::super::schema::{ColumnSchema, LabelSpec, Schema};
    use super::*;
    use ndarray::Array2;

    fn dataset(labels: Vec<usize>) -> Dataset {
        let schema = Schema::new(
            vec![ColumnSchema::numerical("a")],
            LabelSpec {
                name: "y".into(),
                num_classes: 2,
            },
        )
        .unwrap();
        let n = labels.len();
        let rows = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        Dataset::new(schema, rows, Some(labels)).unwrap()
    }

    fn stats(labels: Vec<usize>) -> Result<SourceStats> {
        let d = dataset(labels);
        let pre = Preprocessor::fit(&d)?;
        SourceStats::compute(&d, &pre)
    }

    #[test]
    fn balanced() {
        let s = stats(vec![0, 0, 1, 1]).unwrap();
        assert_eq!(s.label_dist, vec![0.5, 0.5]);
        assert_eq!(s.imbalance_ratio, 1.0);
        assert!(s.column_means[0].abs() < 1e-12);
    }

    #[test]
    fn three_to_one() {
        let s = stats(vec![0, 0, 0, 1]).unwrap();
        assert_eq!(s.label_dist, vec![0.75, 0.25]);
        assert_eq!(s.imbalance_ratio, 3.0);
    }

    #[test]
    fn empty_class_is_an_error() {
        assert!(matches!(stats(vec![0, 0]), Err(Error::EmptyClass { class: 2 })));
    }
}
