use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::importance::{resample_by_importance, ImportanceKind};
use crate::error::{check_dim, Error, Result};
use crate::tabular::{ColumnKind, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Gaussian,
    Uniform,
    RandomDrop,
    ColumnDrop,
    Numerical,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Noise scale in units of the source column std.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Mask probability for the drop corruptions.
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_scale() -> f64 {
    0.1
}

fn default_rate() -> f64 {
    0.2
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, seed: u64) -> Self {
        Self {
            kind,
            scale: default_scale(),
            rate: default_rate(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("noise scale must be positive, got {}", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::invalid(format!("drop rate must lie in [0, 1], got {}", self.rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionTally {
    /// Cells whose value was changed by noise or replaced by a drop.
    pub cells_modified: usize,
    /// Categorical cells left as-is by the additive noise corruptions.
    pub categorical_cells_skipped: usize,
    /// Columns masked by a column drop.
    pub columns_dropped: usize,
    /// Column used by importance resampling.
    pub importance_column: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub dataset: Dataset,
    pub tally: CorruptionTally,
}

/// Population std of each raw source column (categorical columns get 0).
fn source_std(source: &Dataset) -> Vec<f64> {
    let n = source.len() as f64;
    source
        .schema()
        .columns
        .iter()
        .zip(source.rows().columns())
        .map(|(col, values)| match col.kind {
            ColumnKind::Numerical => {
                let mean = values.sum() / n;
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
            }
            ColumnKind::Categorical => 0.0,
        })
        .collect()
}

fn draw_from_marginal<R: Rng>(source: &Dataset, column: usize, rng: &mut R) -> f64 {
    source.rows()[[rng.random_range(0..source.len()), column]]
}

/// Applies one corruption to the test set. Drop replacements are drawn from
/// the source empirical marginal of the same column.
pub fn apply_corruption(test: &Dataset, source: &Dataset, spec: &CorruptionSpec) -> Result<Corrupted> {
    spec.validate()?;
    if test.schema().columns != source.schema().columns {
        return Err(Error::Schema("test and source schemas differ".into()));
    }
    check_dim("corruption columns", source.num_columns(), test.num_columns())?;
    if source.is_empty() {
        return Err(Error::invalid("corruption needs a non-empty source set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tally = CorruptionTally::default();
    let kinds: Vec<ColumnKind> = test.schema().columns.iter().map(|c| c.kind).collect();
    let mut rows: Array2<f64> = test.rows().clone();
    match spec.kind {
        CorruptionKind::Gaussian | CorruptionKind::Uniform => {
            let std = source_std(source);
            let normal = Normal::new(0.0, spec.scale).map_err(|e| Error::invalid(e.to_string()))?;
            let uniform = Uniform::new(-spec.scale, spec.scale).map_err(|e| Error::invalid(e.to_string()))?;
            for mut row in rows.rows_mut() {
                for (u, cell) in row.iter_mut().enumerate() {
                    if kinds[u] == ColumnKind::Categorical {
                        tally.categorical_cells_skipped += 1;
                        continue;
                    }
                    let z = if spec.kind == CorruptionKind::Gaussian {
                        normal.sample(&mut rng)
                    } else {
                        uniform.sample(&mut rng)
                    };
                    *cell += z * std[u];
                    tally.cells_modified += 1;
                }
            }
        }
        CorruptionKind::RandomDrop => {
            for mut row in rows.rows_mut() {
                for (u, cell) in row.iter_mut().enumerate() {
                    if rng.random_bool(spec.rate) {
                        *cell = draw_from_marginal(source, u, &mut rng);
                        tally.cells_modified += 1;
                    }
                }
            }
        }
        CorruptionKind::ColumnDrop => {
            let mask: Vec<bool> = (0..kinds.len()).map(|_| rng.random_bool(spec.rate)).collect();
            for (u, &dropped) in mask.iter().enumerate() {
                if !dropped {
                    continue;
                }
                tally.columns_dropped += 1;
                for cell in rows.column_mut(u) {
                    *cell = draw_from_marginal(source, u, &mut rng);
                    tally.cells_modified += 1;
                }
            }
        }
        CorruptionKind::Numerical | CorruptionKind::Categorical => {
            let kind = if spec.kind == CorruptionKind::Numerical {
                ImportanceKind::Numerical
            } else {
                ImportanceKind::Categorical
            };
            let resampled = resample_by_importance(test, source, kind, spec.seed)?;
            tally.importance_column = Some(resampled.column);
            return Ok(Corrupted {
                dataset: test.select_rows(&resampled.rows)?,
                tally,
            });
        }
    }
    Ok(Corrupted {
        dataset: test.with_rows(rows)?,
        tally,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{ColumnSchema, LabelSpec, Schema};
    use ndarray::Array2;
    use rand_distr::StandardNormal;

    fn schema(numeric: usize, categorical: bool) -> Schema {
        let mut columns: Vec<ColumnSchema> =
            (0..numeric).map(|i| ColumnSchema::numerical(format!("x{i}"))).collect();
        if categorical {
            columns.push(ColumnSchema::categorical("c", ["a", "b", "c"]));
        }
        Schema {
            columns,
            label: LabelSpec { name: "y".into(), num_classes: 2 },
        }
    }

    fn normal_data(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        Dataset::new(schema(d, false), rows, Some((0..n).map(|i| i % 2).collect())).unwrap()
    }

    #[test]
    fn gaussian_shift_scales_with_source_std() {
        // one cell, source std 2: the shift equals z * 2 for the sampled z
        let src = Dataset::new(schema(1, false), ndarray::array![[-1.0], [3.0]], Some(vec![0, 1])).unwrap();
        let test = Dataset::new(schema(1, false), ndarray::array![[0.0]], Some(vec![0])).unwrap();
        let spec = CorruptionSpec::new(CorruptionKind::Gaussian, 7);
        let out = apply_corruption(&test, &src, &spec).unwrap();
        let z: f64 = Normal::new(0.0, 0.1).unwrap().sample(&mut ChaCha8Rng::seed_from_u64(7));
        assert!((out.dataset.rows()[[0, 0]] - 2.0 * z).abs() < 1e-12);
    }

    #[test]
    fn gaussian_noise_raises_unit_variance_to_1_01() {
        let data = normal_data(100_000, 1, 1);
        let out = apply_corruption(&data, &data, &CorruptionSpec::new(CorruptionKind::Gaussian, 2)).unwrap();
        let col = out.dataset.rows().column(0).to_owned();
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let clean = data.rows().column(0);
        let clean_mean = clean.sum() / n;
        let base = clean.iter().map(|v| (v - clean_mean).powi(2)).sum::<f64>() / n;
        // expected factor 1 + 0.1^2 relative to the clean variance
        assert!((var / base - 1.01).abs() < 0.005, "ratio {}", var / base);
    }

    #[test]
    fn random_drop_rate_concentrates() {
        let data = normal_data(1000, 10, 3);
        let src = normal_data(50, 10, 4);
        let out = apply_corruption(&data, &src, &CorruptionSpec::new(CorruptionKind::RandomDrop, 5)).unwrap();
        let rate = out.tally.cells_modified as f64 / 10_000.0;
        assert!((rate - 0.2).abs() < 0.02, "rate {rate}");
        let changed = data
            .rows()
            .iter()
            .zip(out.dataset.rows())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, out.tally.cells_modified);
    }

    #[test]
    fn column_drop_replaces_whole_columns() {
        let data = normal_data(200, 12, 6);
        let src = normal_data(300, 12, 7);
        let out = apply_corruption(&data, &src, &CorruptionSpec { rate: 0.5, ..CorruptionSpec::new(CorruptionKind::ColumnDrop, 8) }).unwrap();
        assert!(out.tally.columns_dropped > 0);
        let mut dropped = 0;
        for u in 0..12 {
            let same = data.rows().column(u).iter().zip(out.dataset.rows().column(u)).filter(|(a, b)| a == b).count();
            // untouched columns are identical; dropped ones come from the source pool
            if same != 200 {
                dropped += 1;
                for v in out.dataset.rows().column(u) {
                    assert!(src.rows().column(u).iter().any(|s| s == v));
                }
            }
        }
        assert_eq!(dropped, out.tally.columns_dropped);
    }

    #[test]
    fn noise_skips_categorical_cells() {
        let rows = ndarray::array![[0.5, 1.0], [1.5, 2.0], [2.5, 0.0]];
        let data = Dataset::new(schema(1, true), rows, Some(vec![0, 1, 0])).unwrap();
        let out = apply_corruption(&data, &data, &CorruptionSpec::new(CorruptionKind::Uniform, 1)).unwrap();
        assert_eq!(out.tally.categorical_cells_skipped, 3);
        assert_eq!(out.dataset.rows().column(1), data.rows().column(1));
    }

    #[test]
    fn seeded_and_validated() {
        let data = normal_data(30, 3, 9);
        let spec = CorruptionSpec::new(CorruptionKind::RandomDrop, 4);
        assert_eq!(apply_corruption(&data, &data, &spec).unwrap(), apply_corruption(&data, &data, &spec).unwrap());
        assert!(apply_corruption(&data, &data, &CorruptionSpec { rate: 1.5, ..spec }).is_err());
        assert!(apply_corruption(&data, &data, &CorruptionSpec { scale: 0.0, ..spec }).is_err());
    }
}
