//! Source classifier: training on labeled source rows, logits for test
//! batches, and import of logits produced by external models.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::metrics::classification_metrics;
use crate::nn::{
    read_params, softmax_cross_entropy, write_params, Activation, DenseNet, Optimizer, TrainConfig,
};
use crate::scalar::{argmax, Scalar};
use crate::tabular::{batch_indices, BatchOrder, Dataset, Preprocessor};

/// Fraction of source rows held out for model selection.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Logit rows for one batch, tagged with the dataset rows they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch<S> {
    pub logits: Array2<S>,
    pub row_ids: Vec<usize>,
}

impl<S: Scalar> LogitsBatch<S> {
    pub fn new(logits: Array2<S>, row_ids: Vec<usize>) -> Result<Self> {
        check_dim("logit rows", logits.nrows(), row_ids.len())?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Self { logits, row_ids })
    }

    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.ncols()
    }

    /// Rows at the given batch positions.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            logits: self.logits.select(Axis(0), positions),
            row_ids: positions.iter().map(|&p| self.row_ids[p]).collect(),
        }
    }
}

/// Hidden layer widths of the source MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub hidden: Vec<usize>,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_losses: Vec<f64>,
    pub validation_macro_f1: Vec<f64>,
    pub best_epoch: usize,
}

/// Frozen classifier `encoded features -> C logits` with its preprocessor.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel<S> {
    net: DenseNet<S>,
    preprocessor: Preprocessor,
    num_classes: usize,
}

impl<S: Scalar> SourceModel<S> {
    pub fn new(net: DenseNet<S>, preprocessor: Preprocessor, num_classes: usize) -> Result<Self> {
        check_dim("classifier output width", num_classes, net.output_dim())?;
        check_dim("classifier input width", preprocessor.width(), net.input_dim())?;
        Ok(Self {
            net,
            preprocessor,
            num_classes,
        })
    }

    pub fn net(&self) -> &DenseNet<S> {
        &self.net
    }

    pub fn preprocessor(&self) -> &Preprocessor {
        &self.preprocessor
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn predict_encoded(&self, encoded: ArrayView2<S>) -> Result<Array2<S>> {
        let logits = self.net.predict(encoded)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predicted logits".into()));
        }
        Ok(logits)
    }

    /// Logits for every row of `data`, row ids `0..n`.
    pub fn predict_logits(&self, data: &Dataset) -> Result<LogitsBatch<S>> {
        let encoded = self.preprocessor.apply(data)?.matrix.mapv(S::lit);
        let logits = self.predict_encoded(encoded.view())?;
        LogitsBatch::new(logits, (0..data.len()).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64) -> Result<()> {
        let meta = serde_json::json!({
            "model": "source_classifier",
            "num_classes": self.num_classes,
            "preprocessor": self.preprocessor,
        });
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_params(file, seed, &[("classifier", &self.net)], meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let (header, mut nets) = read_params::<S, _>(file)?;
        if header.meta["model"] != "source_classifier" || nets.len() != 1 {
            return Err(Error::invalid("file does not hold a source classifier"));
        }
        let num_classes = header.meta["num_classes"]
            .as_u64()
            .ok_or_else(|| Error::invalid("missing num_classes"))? as usize;
        let preprocessor: Preprocessor =
            serde_json::from_value(header.meta["preprocessor"].clone())?;
        let (_, net) = nets.remove(0);
        Self::new(net, preprocessor, num_classes)
    }
}

/// Trains an MLP by softmax cross-entropy with mini-batch updates. A seeded
/// 10% split selects the epoch with the best validation macro F1.
pub fn train_source_classifier<S: Scalar>(
    source: &Dataset,
    pre: &Preprocessor,
    cfg: &TrainConfig,
    spec: &ClassifierSpec,
) -> Result<(SourceModel<S>, TrainHistory)> {
    cfg.validate()?;
    let labels = source.require_labels("source training")?;
    let num_classes = source.num_classes();
    if num_classes < 2 {
        return Err(Error::invalid("source training needs at least two classes"));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::invalid("source labels contain a single class"));
    }
    let encoded = pre.apply(source)?.matrix.mapv(S::lit);

    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let n_val = ((source.len() as f64) * VALIDATION_FRACTION).round() as usize;
    let (val_rows, train_rows) = if n_val >= 1 && n_val < source.len() {
        order.split_at(n_val)
    } else {
        (&order[..], &order[..])
    };
    let train_x = encoded.select(Axis(0), train_rows);
    let train_y: Vec<usize> = train_rows.iter().map(|&i| labels[i]).collect();
    let val_x = encoded.select(Axis(0), val_rows);
    let val_y: Vec<usize> = val_rows.iter().map(|&i| labels[i]).collect();

    let mut dims = vec![pre.width()];
    dims.extend(&spec.hidden);
    dims.push(num_classes);
    let mut acts = vec![Activation::Relu; spec.hidden.len()];
    acts.push(Activation::Identity);
    let mut net = DenseNet::<S>::glorot_with(&dims, &acts, &mut rng)?;
    let mut opt = Optimizer::new(cfg);

    let mut history = TrainHistory::default();
    let mut best = (f64::NEG_INFINITY, net.clone());
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let batches = batch_indices(
            train_rows.len(),
            cfg.batch_size.max(2),
            BatchOrder::Shuffled {
                seed: cfg.seed.wrapping_add(1 + epoch as u64),
            },
        )?;
        let mut loss_sum = 0.0;
        for batch in batches {
            let x = train_x.select(Axis(0), &batch);
            let y: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let cache = net.forward(x.view())?;
            let (loss, grad) = softmax_cross_entropy(cache.output.view(), &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += loss.as_f64() * batch.len() as f64;
            net.backward_and_step(&cache, grad.view(), &mut opt)?;
        }
        history.epoch_losses.push(loss_sum / train_rows.len() as f64);

        let val_pred: Vec<usize> = net
            .predict(val_x.view())?
            .outer_iter()
            .map(|r| argmax(r.as_slice().expect("contiguous row")))
            .collect();
        let f1 = classification_metrics(&val_pred, &val_y, num_classes)?.macro_f1;
        history.validation_macro_f1.push(f1);
        if f1 > best.0 {
            best = (f1, net.clone());
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                log::debug!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    Ok((SourceModel::new(best.1, pre.clone(), num_classes)?, history))
}

/// Reads a headerless `N × C` CSV of logits.
///
/// A file whose rows all look like probability vectors (entries in `[0, 1]`,
/// row sums within `1e-6` of 1) is converted with `ln(p + 1e-12)` and a
/// warning is logged.
pub fn read_logits_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut values = Vec::new();
    let mut n = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != num_classes {
            return Err(Error::Parse {
                row,
                message: format!("expected {num_classes} logits, found {}", record.len()),
            });
        }
        for cell in record.iter() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: "non-finite logit".into(),
                });
            }
            values.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Parse {
            row: 0,
            message: "logit file is empty".into(),
        });
    }
    let mut logits = Array2::from_shape_vec((n, num_classes), values).expect("shape");
    let looks_like_probs = logits.outer_iter().all(|r| {
        r.iter().all(|&p| (0.0..=1.0).contains(&p)) && (r.sum() - 1.0).abs() <= 1e-6
    });
    if looks_like_probs {
        log::warn!("logit file rows look like probabilities; applying ln(p + 1e-12)");
        logits.mapv_inplace(|p| (p + 1e-12).ln());
    }
    Ok(logits)
}

/// Imported logits split into batches in the dataset's given row order.
pub fn import_logits<S: Scalar>(
    path: impl AsRef<Path>,
    num_classes: usize,
    batch_size: usize,
) -> Result<Vec<LogitsBatch<S>>> {
    let logits = read_logits_csv(path, num_classes)?.mapv(S::lit);
    batch_indices(logits.nrows(), batch_size, BatchOrder::Given)?
        .map(|rows| LogitsBatch::new(logits.select(Axis(0), &rows), rows))
        .collect()
}
