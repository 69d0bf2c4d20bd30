use std::collections::VecDeque;

use rand::distr::weighted::WeightedIndex;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{Dataset, SourceStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelShiftKind {
    ClassImbalance {
        #[serde(default = "default_rho")]
        rho: f64,
    },
    Temporal {
        #[serde(default = "default_window")]
        window: usize,
        #[serde(default = "default_eta")]
        eta: f64,
    },
}

fn default_rho() -> f64 {
    10.0
}

fn default_window() -> usize {
    5
}

fn default_eta() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelShiftSpec {
    #[serde(flatten)]
    pub kind: LabelShiftKind,
    /// Stream length; `None` uses the size of the test set.
    #[serde(default)]
    pub length: Option<usize>,
    #[serde(default)]
    pub replacement: bool,
    #[serde(default)]
    pub seed: u64,
}

impl LabelShiftSpec {
    pub fn class_imbalance(rho: f64, seed: u64) -> Self {
        Self {
            kind: LabelShiftKind::ClassImbalance { rho },
            length: None,
            replacement: false,
            seed,
        }
    }

    pub fn temporal(window: usize, eta: f64, seed: u64) -> Self {
        Self {
            kind: LabelShiftKind::Temporal { window, eta },
            length: None,
            replacement: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LabelShiftKind::ClassImbalance { rho } if !(rho >= 1.0 && rho.is_finite()) => {
                Err(Error::invalid(format!("rho must be at least 1, got {rho}")))
            }
            LabelShiftKind::Temporal { window: 0, .. } => {
                Err(Error::invalid("temporal window must be at least 1"))
            }
            LabelShiftKind::Temporal { eta, .. } if !(eta > 0.0) => {
                Err(Error::invalid(format!("eta must be positive, got {eta}")))
            }
            _ => Ok(()),
        }
    }
}

/// Label counts over the last `window` sampled labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalWindow {
    window: usize,
    recent: VecDeque<usize>,
    counts: Vec<usize>,
}

impl TemporalWindow {
    pub fn new(window: usize, num_classes: usize) -> Self {
        Self {
            window,
            recent: VecDeque::with_capacity(window + 1),
            counts: vec![0; num_classes],
        }
    }

    pub fn push(&mut self, label: usize) {
        self.recent.push_back(label);
        self.counts[label] += 1;
        if self.recent.len() > self.window {
            let old = self.recent.pop_front().expect("non-empty");
            self.counts[old] -= 1;
        }
    }

    pub fn recent(&self) -> impl Iterator<Item = usize> + '_ {
        self.recent.iter().copied()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Concentration for the next draw: uniform before any label has been
    /// seen, then window counts divided by `w`.
    pub fn concentration(&self) -> Vec<f64> {
        let c = self.counts.len();
        if self.recent.is_empty() {
            return vec![1.0 / c as f64; c];
        }
        self.counts.iter().map(|&k| k as f64 / self.window as f64).collect()
    }
}

/// `max(η, π) / Σ max(η, π)`.
pub fn smooth_dirichlet_draw(pi: &[f64], eta: f64) -> Vec<f64> {
    let clipped: Vec<f64> = pi.iter().map(|&p| p.max(eta)).collect();
    let total: f64 = clipped.iter().sum();
    clipped.into_iter().map(|p| p / total).collect()
}

fn dirichlet<R: Rng>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let mut draws = Vec::with_capacity(alpha.len());
    for &a in alpha {
        if a == 0.0 {
            draws.push(0.0);
        } else {
            let g = Gamma::new(a, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
            draws.push(g.sample(rng));
        }
    }
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|d| *d /= total);
    }
    Ok(draws)
}

/// Per-class unnormalized weights `rank/C·(ρ − 1) + 1`, ranks by ascending
/// source frequency (ties by class index).
pub fn class_imbalance_weights(source_dist: &[f64], rho: f64) -> Vec<f64> {
    let c = source_dist.len();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| source_dist[a].total_cmp(&source_dist[b]));
    let mut weights = vec![0.0; c];
    for (rank0, &class) in order.iter().enumerate() {
        weights[class] = (rank0 + 1) as f64 / c as f64 * (rho - 1.0) + 1.0;
    }
    weights
}

/// An ordered stream of test rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelStream {
    pub rows: Vec<usize>,
    /// Sampling probability of each test row (class imbalance) or `None`.
    pub row_probabilities: Option<Vec<f64>>,
}

/// Orders test rows into a label-shifted stream. Labels drive the sampling
/// and are not otherwise used.
pub fn sample_label_shifted_stream(
    test: &Dataset,
    stats: &SourceStats,
    spec: &LabelShiftSpec,
) -> Result<LabelStream> {
    spec.validate()?;
    let labels = test.require_labels("label-shift sampling")?;
    let c = test.num_classes();
    crate::error::check_dim("label-shift classes", c, stats.num_classes())?;
    let length = spec.length.unwrap_or(test.len());
    if !spec.replacement && length > test.len() {
        return Err(Error::invalid(format!(
            "stream of {length} rows requested from {} rows without replacement",
            test.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::invalid("cannot sample from an empty test set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        LabelShiftKind::ClassImbalance { rho } => {
            let class_w = class_imbalance_weights(&stats.label_dist, rho);
            let raw: Vec<f64> = labels.iter().map(|&y| class_w[y]).collect();
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let rows = if spec.replacement {
                let dist = WeightedIndex::new(&probs).map_err(|e| Error::invalid(e.to_string()))?;
                (0..length).map(|_| dist.sample(&mut rng)).collect()
            } else {
                let idx: Vec<usize> = (0..test.len()).collect();
                idx.choose_multiple_weighted(&mut rng, length, |&i| probs[i])
                    .map_err(|e| Error::invalid(e.to_string()))?
                    .copied()
                    .collect()
            };
            Ok(LabelStream {
                rows,
                row_probabilities: Some(probs),
            })
        }
        LabelShiftKind::Temporal { window, eta } => {
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
            for (i, &y) in labels.iter().enumerate() {
                pools[y].push(i);
            }
            let mut state = TemporalWindow::new(window, c);
            let mut rows = Vec::with_capacity(length);
            for _ in 0..length {
                let pi = dirichlet(&state.concentration(), &mut rng)?;
                let mut pi = smooth_dirichlet_draw(&pi, eta);
                // classes with no rows left cannot be drawn
                for (j, pool) in pools.iter().enumerate() {
                    if pool.is_empty() {
                        pi[j] = 0.0;
                    }
                }
                let dist = WeightedIndex::new(&pi).map_err(|e| Error::invalid(e.to_string()))?;
                let y = dist.sample(&mut rng);
                let pos = rng.random_range(0..pools[y].len());
                let row = if spec.replacement {
                    pools[y][pos]
                } else {
                    pools[y].swap_remove(pos)
                };
                rows.push(row);
                state.push(y);
            }
            Ok(LabelStream {
                rows,
                row_probabilities: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{ColumnSchema, LabelSpec, Schema};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn data(labels: Vec<usize>, c: usize) -> Dataset {
        let schema = Schema {
            columns: vec![ColumnSchema::numerical("x")],
            label: LabelSpec { name: "y".into(), num_classes: c },
        };
        let n = labels.len();
        Dataset::new(schema, Array2::zeros((n, 1)), Some(labels)).unwrap()
    }

    fn stats(dist: Vec<f64>) -> SourceStats {
        SourceStats { column_means: vec![0.0], imbalance_ratio: 1.0, label_dist: dist }
    }

    #[test]
    fn imbalance_weights_two_classes() {
        assert_eq!(class_imbalance_weights(&[0.7, 0.3], 10.0), vec![10.0, 5.5]);
        // ties keep class order
        assert_eq!(class_imbalance_weights(&[0.5, 0.5], 10.0), vec![5.5, 10.0]);
    }

    #[test]
    fn smoothing_example() {
        let s = smooth_dirichlet_draw(&[0.0, 1.0], 1e-6);
        assert!((s[0] - 1e-6 / (1.0 + 1e-6)).abs() < 1e-18);
        assert!((s[1] - 1.0 / (1.0 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn window_after_five_identical_labels() {
        let mut w = TemporalWindow::new(5, 2);
        assert_eq!(w.concentration(), vec![0.5, 0.5]);
        for _ in 0..5 {
            w.push(0);
        }
        assert_eq!(w.concentration(), vec![1.0, 0.0]);
        w.push(1);
        assert_eq!(w.counts(), &[4, 1]);
    }

    #[test]
    fn imbalance_stream_is_a_permutation_when_full_length() {
        let d = data((0..200).map(|i| usize::from(i % 4 == 0)).collect(), 2);
        let st = stats(vec![0.25, 0.75]);
        let s = sample_label_shifted_stream(&d, &st, &LabelShiftSpec::class_imbalance(10.0, 3)).unwrap();
        let mut rows = s.rows.clone();
        rows.sort_unstable();
        assert_eq!(rows, (0..200).collect::<Vec<_>>());
        let p = s.row_probabilities.unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // first half of the stream favours the rarer source class 0
        let early = s.rows[..50].iter().filter(|&&r| d.labels().unwrap()[r] == 0).count();
        assert!(early > 25, "early count {early}");
    }

    #[test]
    fn too_long_without_replacement_errors() {
        let d = data(vec![0, 1, 0, 1], 2);
        let spec = LabelShiftSpec { length: Some(9), ..LabelShiftSpec::temporal(5, 1e-6, 0) };
        assert!(sample_label_shifted_stream(&d, &stats(vec![0.5, 0.5]), &spec).is_err());
        let spec = LabelShiftSpec { replacement: true, ..spec };
        assert_eq!(sample_label_shifted_stream(&d, &stats(vec![0.5, 0.5]), &spec).unwrap().rows.len(), 9);
    }

    #[test]
    fn temporal_stream_is_seeded_and_clustered() {
        let d = data((0..600).map(|i| i % 3).collect(), 3);
        let st = stats(vec![1.0 / 3.0; 3]);
        let spec = LabelShiftSpec { length: Some(300), ..LabelShiftSpec::temporal(5, 1e-6, 11) };
        let a = sample_label_shifted_stream(&d, &st, &spec).unwrap();
        assert_eq!(a, sample_label_shifted_stream(&d, &st, &spec).unwrap());
        let y: Vec<usize> = a.rows.iter().map(|&r| d.labels().unwrap()[r]).collect();
        let repeats = y.windows(2).filter(|w| w[0] == w[1]).count() as f64 / 299.0;
        // iid uniform labels would repeat about a third of the time
        assert!(repeats > 0.6, "repeat rate {repeats}");
    }

    proptest! {
        #[test]
        fn window_matches_last_labels(labels in proptest::collection::vec(0usize..4, 1..60), w in 1usize..8) {
            let mut win = TemporalWindow::new(w, 4);
            for (i, &y) in labels.iter().enumerate() {
                win.push(y);
                let start = (i + 1).saturating_sub(w);
                let mut expected = [0usize; 4];
                for &l in &labels[start..=i] {
                    expected[l] += 1;
                }
                prop_assert_eq!(win.counts(), &expected[..]);
                prop_assert_eq!(win.recent().collect::<Vec<_>>(), labels[start..=i].to_vec());
            }
        }

        #[test]
        fn smoothed_draws_are_simplices(pi in proptest::collection::vec(0.0f64..1.0, 2..6)) {
            let s = smooth_dirichlet_draw(&pi, 1e-6);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.iter().all(|&v| v > 0.0));
        }
    }
}
