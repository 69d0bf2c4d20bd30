use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, UNKNOWN_CATEGORY};
use super::schema::{ColumnKind, Schema};
use crate::error::{check_dim, Error, Result};

/// Standard deviations below this are treated as 1 when scaling.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnEncoder {
    /// z-score with the population standard deviation.
    Numerical { mean: f64, std: f64 },
    OneHot { n_categories: usize },
}

impl ColumnEncoder {
    pub fn width(&self) -> usize {
        match self {
            ColumnEncoder::Numerical { .. } => 1,
            ColumnEncoder::OneHot { n_categories } => *n_categories,
        }
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            ColumnEncoder::Numerical { .. } => ColumnKind::Numerical,
            ColumnEncoder::OneHot { .. } => ColumnKind::Categorical,
        }
    }
}

/// Span of encoded columns produced by one raw column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedGroup {
    pub column: usize,
    pub kind: ColumnKind,
    pub range: Range<usize>,
}

/// Encoded feature matrix plus the count of unseen-category cells that were zeroed.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub matrix: Array2<f64>,
    pub unseen_categories: usize,
}

/// Fitted per-column encoders. Fit on source data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    columns: Vec<ColumnEncoder>,
}

impl Preprocessor {
    pub fn fit(source: &Dataset) -> Result<Self> {
        let schema = source.schema();
        let n = source.len() as f64;
        let columns = schema
            .columns
            .iter()
            .enumerate()
            .map(|(u, col)| match col.kind {
                ColumnKind::Numerical => {
                    let values = source.rows().column(u);
                    let mean = values.sum() / n;
                    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    ColumnEncoder::Numerical {
                        mean,
                        std: var.sqrt(),
                    }
                }
                ColumnKind::Categorical => ColumnEncoder::OneHot {
                    n_categories: col.categories.len(),
                },
            })
            .collect();
        Ok(Self { columns })
    }

    pub fn encoders(&self) -> &[ColumnEncoder] {
        &self.columns
    }

    pub fn width(&self) -> usize {
        self.columns.iter().map(ColumnEncoder::width).sum()
    }

    pub fn groups(&self) -> Vec<EncodedGroup> {
        let mut offset = 0;
        self.columns
            .iter()
            .enumerate()
            .map(|(column, enc)| {
                let range = offset..offset + enc.width();
                offset = range.end;
                EncodedGroup {
                    column,
                    kind: enc.kind(),
                    range,
                }
            })
            .collect()
    }

    /// Checks that `schema` has the layout this preprocessor was fit on.
    pub fn check_schema(&self, schema: &Schema) -> Result<()> {
        check_dim("preprocessor columns", self.columns.len(), schema.width())?;
        for (enc, col) in self.columns.iter().zip(&schema.columns) {
            let compatible = match enc {
                ColumnEncoder::Numerical { .. } => col.kind == ColumnKind::Numerical,
                ColumnEncoder::OneHot { n_categories } => {
                    col.kind == ColumnKind::Categorical && col.categories.len() == *n_categories
                }
            };
            if !compatible {
                return Err(Error::Schema(format!(
                    "column `{}` does not match the fitted encoder",
                    col.name
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, data: &Dataset) -> Result<Encoded> {
        self.check_schema(data.schema())?;
        let mut matrix = Array2::zeros((data.len(), self.width()));
        let mut unseen = 0;
        for group in self.groups() {
            let raw = data.rows().column(group.column);
            match &self.columns[group.column] {
                ColumnEncoder::Numerical { mean, std } => {
                    let scale = if *std < STD_FLOOR { 1.0 } else { *std };
                    for (i, &v) in raw.iter().enumerate() {
                        matrix[[i, group.range.start]] = (v - mean) / scale;
                    }
                }
                ColumnEncoder::OneHot { .. } => {
                    for (i, &v) in raw.iter().enumerate() {
                        if v == UNKNOWN_CATEGORY {
                            unseen += 1;
                        } else {
                            matrix[[i, group.range.start + v as usize]] = 1.0;
                        }
                    }
                }
            }
        }
        if unseen > 0 {
            log::warn!("{unseen} cells held categories unseen at fit time; encoded as all-zero");
        }
        Ok(Encoded {
            matrix,
            unseen_categories: unseen,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::schema::{ColumnSchema, LabelSpec};
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn schema(cols: Vec<ColumnSchema>) -> Schema {
        Schema::new(
            cols,
            LabelSpec {
                name: "y".into(),
                num_classes: 2,
            },
        )
        .unwrap()
    }

    #[test]
    fn two_values_standardize_to_unit() {
        let d = Dataset::new(
            schema(vec![ColumnSchema::numerical("a")]),
            array![[2.0], [4.0]],
            None,
        )
        .unwrap();
        let pre = Preprocessor::fit(&d).unwrap();
        assert_eq!(
            pre.encoders()[0],
            ColumnEncoder::Numerical {
                mean: 3.0,
                std: 1.0
            }
        );
        let enc = pre.apply(&d).unwrap();
        assert_eq!(enc.matrix[[0, 0]], -1.0);
        assert_eq!(enc.matrix[[1, 0]], 1.0);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let d = Dataset::new(
            schema(vec![ColumnSchema::numerical("a")]),
            array![[5.0], [5.0], [5.0]],
            None,
        )
        .unwrap();
        let enc = Preprocessor::fit(&d).unwrap().apply(&d).unwrap();
        assert!(enc.matrix.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_and_unseen() {
        let s = schema(vec![
            ColumnSchema::numerical("a"),
            ColumnSchema::categorical("c", ["a", "b"]),
        ]);
        let d = Dataset::new(s.clone(), array![[0.0, 0.0], [1.0, 1.0]], None).unwrap();
        let pre = Preprocessor::fit(&d).unwrap();
        assert_eq!(pre.width(), 3);
        let enc = pre.apply(&d).unwrap();
        assert_eq!(enc.matrix.row(1).to_vec()[1..], [0.0, 1.0]);

        let t = Dataset::new(s, array![[0.5, UNKNOWN_CATEGORY]], None).unwrap();
        let enc = pre.apply(&t).unwrap();
        assert_eq!(enc.unseen_categories, 1);
        assert_eq!(enc.matrix.row(0).to_vec()[1..], [0.0, 0.0]);
        assert_eq!(
            pre.groups()[1],
            EncodedGroup {
                column: 1,
                kind: ColumnKind::Categorical,
                range: 1..3
            }
        );
    }

    proptest! {
        #[test]
        fn fit_set_is_standardized(
            values in prop::collection::vec(-1e3f64..1e3, 2..60),
            other in prop::collection::vec(-1e3f64..1e3, 2..60),
        ) {
            let n = values.len().min(other.len());
            let rows = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { values[i] } else { other[i] });
            let d = Dataset::new(
                schema(vec![ColumnSchema::numerical("a"), ColumnSchema::numerical("b")]),
                rows,
                None,
            ).unwrap();
            let pre = Preprocessor::fit(&d).unwrap();
            let enc = pre.apply(&d).unwrap();
            for (u, e) in pre.encoders().iter().enumerate() {
                let ColumnEncoder::Numerical { std, .. } = e else { unreachable!() };
                let col = enc.matrix.column(u);
                let mean = col.sum() / n as f64;
                prop_assert!(mean.abs() < 1e-9);
                if *std > 1e-6 {
                    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
                    prop_assert!((sd - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
