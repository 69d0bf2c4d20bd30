use ndarray::{s, Array2, ArrayView2};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;
use crate::tabular::{ColumnKind, EncodedGroup};

/// Deviations of one raw column's encoded values from their source means.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendGroup<S> {
    pub column: usize,
    pub kind: ColumnKind,
    /// `N × width` (width 1 for numerical columns, K for one-hot columns).
    pub values: Array2<S>,
}

/// Per-column shift trend of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftTrend<S> {
    pub groups: Vec<TrendGroup<S>>,
}

impl<S: Scalar> ShiftTrend<S> {
    pub fn batch_size(&self) -> usize {
        self.groups.first().map_or(0, |g| g.values.nrows())
    }

    pub fn num_columns(&self) -> usize {
        self.groups.len()
    }

    /// Trend restricted to the given batch positions.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            groups: self
                .groups
                .iter()
                .map(|g| TrendGroup {
                    column: g.column,
                    kind: g.kind,
                    values: g.values.select(ndarray::Axis(0), positions),
                })
                .collect(),
        }
    }
}

/// `s_u = (x_iu − mean_u)` for every encoded column, grouped by raw column.
pub fn compute_shift_trend<S: Scalar>(
    batch: ArrayView2<S>,
    groups: &[EncodedGroup],
    column_means: &[f64],
) -> Result<ShiftTrend<S>> {
    if batch.nrows() == 0 {
        return Err(Error::invalid("shift trend needs a non-empty batch"));
    }
    let width = groups.last().map_or(0, |g| g.range.end);
    check_dim("shift trend columns", width, batch.ncols())?;
    check_dim("shift trend means", width, column_means.len())?;
    let groups = groups
        .iter()
        .map(|g| {
            let mut values = batch.slice(s![.., g.range.clone()]).to_owned();
            for (k, mut col) in values.columns_mut().into_iter().enumerate() {
                let mean = S::lit(column_means[g.range.start + k]);
                col.mapv_inplace(|v| v - mean);
            }
            TrendGroup {
                column: g.column,
                kind: g.kind,
                values,
            }
        })
        .collect();
    Ok(ShiftTrend { groups })
}
