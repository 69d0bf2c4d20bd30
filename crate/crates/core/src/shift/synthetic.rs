use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{ColumnSchema, Dataset, LabelSpec, Schema};

/// Class-conditional Gaussian blobs shared by both domains; only the label
/// marginal differs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_features: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub source_label_dist: Vec<f64>,
    pub target_label_dist: Vec<f64>,
    /// Distance between neighbouring class means in units of the noise std.
    pub class_separation: f64,
    /// Categories of an extra categorical column that agrees with the label
    /// 60% of the time; 0 leaves it out.
    #[serde(default)]
    pub categorical_levels: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 2 {
            return Err(Error::invalid("synthetic data needs at least two classes"));
        }
        if self.num_features < c {
            return Err(Error::invalid(format!("{c} classes need at least {c} features")));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::invalid("class separation must be non-negative"));
        }
        if self.categorical_levels == 1 {
            return Err(Error::invalid("a categorical column needs at least two levels"));
        }
        for (name, dist) in [("source", &self.source_label_dist), ("target", &self.target_label_dist)] {
            if dist.len() != c
                || dist.iter().any(|&p| !(p >= 0.0))
                || (dist.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(Error::invalid(format!("{name} label distribution is not a simplex over {c} classes")));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        let mut columns: Vec<ColumnSchema> = (0..self.num_features)
            .map(|j| ColumnSchema::numerical(format!("x{}", j + 1)))
            .collect();
        if self.categorical_levels > 0 {
            columns.push(ColumnSchema::categorical(
                "group",
                (0..self.categorical_levels).map(|k| format!("g{k}")),
            ));
        }
        Schema {
            columns,
            label: LabelSpec { name: "y".into(), num_classes: self.num_classes },
        }
    }

    /// Mean of class `c`: `sep/√2` on axis `c`, so every pair of class
    /// means is `sep` apart.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.num_features];
        mean[class] = self.class_separation / std::f64::consts::SQRT_2;
        mean
    }
}

fn draw_domain(spec: &SyntheticSpec, n: usize, dist: &[f64], rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let picker = WeightedIndex::new(dist).map_err(|e| Error::invalid(e.to_string()))?;
    let means: Vec<Vec<f64>> = (0..spec.num_classes).map(|c| spec.class_mean(c)).collect();
    let width = spec.num_features + usize::from(spec.categorical_levels > 0);
    let mut rows = Array2::zeros((n, width));
    let mut labels = Vec::with_capacity(n);
    for mut row in rows.rows_mut() {
        let y = picker.sample(rng);
        labels.push(y);
        for (j, m) in means[y].iter().enumerate() {
            row[j] = m + rng.sample::<f64, _>(StandardNormal);
        }
        if spec.categorical_levels > 0 {
            let k = spec.categorical_levels;
            row[width - 1] = if rng.random_bool(0.6) { (y % k) as f64 } else { rng.random_range(0..k) as f64 };
        }
    }
    Dataset::new(spec.schema(), rows, Some(labels))
}

/// Draws `(source, target)` from the same class-conditionals.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let source = draw_domain(spec, spec.n_source, &spec.source_label_dist, &mut rng)?;
    let target = draw_domain(spec, spec.n_target, &spec.target_label_dist, &mut rng)?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mmd_permutation_test;

    fn spec(src: Vec<f64>, tgt: Vec<f64>, sep: f64, n: usize) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: src.len(),
            num_features: 3,
            n_source: n,
            n_target: n,
            source_label_dist: src,
            target_label_dist: tgt,
            class_separation: sep,
            categorical_levels: 0,
            seed: 5,
        }
    }

    #[test]
    fn label_frequencies_concentrate() {
        let (s, t) = generate_synthetic_dataset(&spec(vec![0.7, 0.3], vec![0.3, 0.7], 2.0, 5000)).unwrap();
        let freq = |d: &Dataset| d.labels().unwrap().iter().filter(|&&y| y == 0).count() as f64 / 5000.0;
        assert!((freq(&s) - 0.7).abs() < 0.02);
        assert!((freq(&t) - 0.3).abs() < 0.02);
    }

    #[test]
    fn same_label_dist_gives_exchangeable_domains() {
        let (s, t) = generate_synthetic_dataset(&spec(vec![0.5, 0.5], vec![0.5, 0.5], 2.0, 300)).unwrap();
        let test = mmd_permutation_test(s.rows().view(), t.rows().view(), 200, 1).unwrap();
        assert!(test.statistic < test.null_q99, "{test:?}");
    }

    #[test]
    fn zero_separation_makes_classes_identical() {
        let sp = spec(vec![0.5, 0.5], vec![0.5, 0.5], 0.0, 10);
        assert_eq!(sp.class_mean(0), sp.class_mean(1));
    }

    #[test]
    fn means_are_separated_and_schema_has_categorical() {
        let mut sp = spec(vec![0.25; 4], vec![0.25; 4], 2.0, 50);
        sp.num_features = 4;
        sp.categorical_levels = 3;
        for a in 0..4 {
            for b in 0..a {
                let d: f64 = sp.class_mean(a).iter().zip(sp.class_mean(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!((d - 2.0).abs() < 1e-12);
            }
        }
        let (s, _) = generate_synthetic_dataset(&sp).unwrap();
        assert_eq!(s.num_columns(), 5);
        assert!(s.rows().column(4).iter().all(|&v| (0.0..3.0).contains(&v)));
        sp.num_classes = 5;
        sp.source_label_dist = vec![0.2; 5];
        sp.target_label_dist = vec![0.2; 5];
        assert!(generate_synthetic_dataset(&sp).is_err());
    }
}
