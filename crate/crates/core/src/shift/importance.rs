use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Activation, DenseNet, OptimizerKind, Optimizer, TrainConfig};
use crate::scalar::Scalar;
use crate::tabular::{ColumnKind, Dataset, Preprocessor, UNKNOWN_CATEGORY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceKind {
    Numerical,
    Categorical,
}

impl ImportanceKind {
    fn column_kind(self) -> ColumnKind {
        match self {
            Self::Numerical => ColumnKind::Numerical,
            Self::Categorical => ColumnKind::Categorical,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    /// Column the likelihood was fitted on.
    pub column: usize,
    /// Sampling probability of every test row.
    pub probabilities: Vec<f64>,
    /// Drawn test rows, with replacement, as many as the test set holds.
    pub rows: Vec<usize>,
}

const PROXY_STEPS: usize = 300;
const PROXY_LEARNING_RATE: f64 = 0.05;

/// Importance of every raw column: the largest absolute coefficient of a
/// multinomial logistic regression fitted on the standardized, one-hot
/// encoded source.
pub fn column_importance(source: &Dataset) -> Result<Vec<f64>> {
    let labels = source.require_labels("column importance")?;
    let pre = Preprocessor::fit(source)?;
    let x = pre.apply(source)?.matrix;
    let mut net = DenseNet::<f64>::zeros(&[pre.width(), source.num_classes()], &[Activation::Identity])?;
    let cfg = TrainConfig {
        learning_rate: PROXY_LEARNING_RATE,
        optimizer: OptimizerKind::default_adam(),
        ..TrainConfig::default()
    };
    let mut opt = Optimizer::new(&cfg);
    for _ in 0..PROXY_STEPS {
        let cache = net.forward(x.view())?;
        let (_, grad) = softmax_cross_entropy(cache.output.view(), labels)?;
        net.backward_and_step(&cache, grad.view(), &mut opt)?;
    }
    let weights = &net.layers()[0].weights;
    Ok(pre
        .groups()
        .iter()
        .map(|g| {
            weights
                .slice(ndarray::s![g.range.clone(), ..])
                .iter()
                .fold(0.0f64, |m, w| m.max(w.abs()))
        })
        .collect())
}

/// Sampling probabilities proportional to `1 / likelihood`, computed from
/// log-likelihoods to stay finite.
pub fn importance_weights(log_likelihoods: &[f64]) -> Result<Vec<f64>> {
    if log_likelihoods.is_empty() {
        return Err(Error::invalid("importance weights of an empty set"));
    }
    if log_likelihoods.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::NonFinite("log-likelihood".into()));
    }
    let min = log_likelihoods.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = log_likelihoods.iter().map(|l| (min - l).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Resamples the test set with probability inversely proportional to the
/// source likelihood of the most important column of the requested kind.
/// Ties in importance go to the lowest column index.
pub fn resample_by_importance(
    test: &Dataset,
    source: &Dataset,
    kind: ImportanceKind,
    seed: u64,
) -> Result<Resampled> {
    if test.is_empty() {
        return Err(Error::invalid("cannot resample an empty test set"));
    }
    let importance = column_importance(source)?;
    let wanted = kind.column_kind();
    let column = source
        .schema()
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.kind == wanted)
        .fold(None, |best: Option<usize>, (u, _)| match best {
            Some(b) if importance[b] >= importance[u] => Some(b),
            _ => Some(u),
        })
        .ok_or_else(|| Error::invalid(format!("no {wanted:?} column to resample on")))?;
    let src = source.rows().column(column);
    let values = test.rows().column(column);
    let n = src.len() as f64;
    let log_likelihoods: Vec<f64> = match kind {
        ImportanceKind::Numerical => {
            let mean = src.sum() / n;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var <= f64::DENOM_FLOOR {
                return Err(Error::invalid(format!(
                    "column `{}` has zero source variance; pick a different column",
                    source.schema().columns[column].name
                )));
            }
            values
                .iter()
                .map(|v| -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (v - mean).powi(2) / (2.0 * var))
                .collect()
        }
        ImportanceKind::Categorical => {
            let k = source.schema().columns[column].categories.len();
            let mut counts = vec![0.0; k];
            for &code in src {
                counts[code as usize] += 1.0;
            }
            values
                .iter()
                .map(|&code| {
                    let p = if code == UNKNOWN_CATEGORY { 0.0 } else { counts[code as usize] / n };
                    p.max(f64::DENOM_FLOOR).ln()
                })
                .collect()
        }
    };
    let probabilities = importance_weights(&log_likelihoods)?;
    let dist = WeightedIndex::new(&probabilities).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..test.len()).map(|_| dist.sample(&mut rng)).collect();
    Ok(Resampled {
        column,
        probabilities,
        rows,
    })
}
