use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{tempered_loss_and_grad, LossWeights};
use super::trend::ShiftTrend;
use crate::error::{check_dim, Error, Result};
use crate::nn::{
    read_params, write_params, Activation, Dense, DenseNet, ForwardCache, Gradients, Trainable,
};
use crate::scalar::Scalar;
use crate::source::LogitsBatch;
use crate::tabular::{ColumnKind, EncodedGroup};

/// Emitted temperatures are `softplus(head) + TEMPERATURE_FLOOR`.
pub const TEMPERATURE_FLOOR: f64 = 0.05;

/// Per-node summary of a column's trend: mean, std, min, max over the batch.
const NODE_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibratorSpec {
    pub message_layers: usize,
    pub node_width: usize,
    pub head_hidden: usize,
    pub loss: LossWeights,
}

impl Default for CalibratorSpec {
    fn default() -> Self {
        Self {
            message_layers: 2,
            node_width: 16,
            head_hidden: 32,
            loss: LossWeights::default(),
        }
    }
}

/// Produces one positive temperature per sample of a batch.
pub trait TemperatureModel<S> {
    fn temperatures(&self, logits: &LogitsBatch<S>, trend: &ShiftTrend<S>) -> Result<Vec<S>>;
}

/// The same temperature for every sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantTemperature<S>(pub S);

impl<S: Scalar> TemperatureModel<S> for ConstantTemperature<S> {
    fn temperatures(&self, logits: &LogitsBatch<S>, _trend: &ShiftTrend<S>) -> Result<Vec<S>> {
        if !(self.0 > S::zero()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(vec![self.0; logits.len()])
    }
}

/// Message-passing temperature network over the column graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibrator<S> {
    spec: CalibratorSpec,
    groups: Vec<EncodedGroup>,
    num_classes: usize,
    /// One `K → 1` linear projection per categorical column, in column order.
    projections: Vec<DenseNet<S>>,
    numerical_embed: DenseNet<S>,
    categorical_embed: DenseNet<S>,
    /// Each maps `[h_u ∥ mean_v h_v]` to the next node state.
    message: Vec<DenseNet<S>>,
    head: DenseNet<S>,
}

pub(crate) struct CalibratorCache<S> {
    projections: Vec<Option<ForwardCache<S>>>,
    /// Projected trend, `D × N`.
    trend: Array2<S>,
    numerical_rows: Vec<usize>,
    categorical_rows: Vec<usize>,
    numerical_embed: Option<ForwardCache<S>>,
    categorical_embed: Option<ForwardCache<S>>,
    message: Vec<ForwardCache<S>>,
    head: ForwardCache<S>,
}

#[derive(Debug, Clone)]
pub(crate) struct CalibratorGradients<S> {
    projections: Vec<Gradients<S>>,
    numerical_embed: Gradients<S>,
    categorical_embed: Gradients<S>,
    message: Vec<Gradients<S>>,
    head: Gradients<S>,
}

impl<S: Scalar> CalibratorGradients<S> {
    pub(crate) fn slices(&self) -> Vec<&[S]> {
        let mut out = Vec::new();
        for g in &self.projections {
            out.extend(g.slices());
        }
        out.extend(self.numerical_embed.slices());
        out.extend(self.categorical_embed.slices());
        for g in &self.message {
            out.extend(g.slices());
        }
        out.extend(self.head.slices());
        out
    }
}

impl<S: Scalar> Trainable<S> for Calibrator<S> {
    fn params_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = Vec::new();
        for p in &mut self.projections {
            out.extend(p.params_mut());
        }
        out.extend(self.numerical_embed.params_mut());
        out.extend(self.categorical_embed.params_mut());
        for m in &mut self.message {
            out.extend(m.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }
}

/// Bias that makes `softplus(bias) + floor == 1`.
fn unit_temperature_bias() -> f64 {
    let target: f64 = 1.0 - TEMPERATURE_FLOOR;
    target.exp_m1().ln()
}

impl<S: Scalar> Calibrator<S> {
    /// Glorot-initialized network whose head starts at temperature 1 everywhere.
    pub fn new(
        groups: Vec<EncodedGroup>,
        num_classes: usize,
        spec: CalibratorSpec,
        seed: u64,
    ) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::invalid("calibrator needs at least one column"));
        }
        if spec.node_width == 0 || spec.head_hidden == 0 {
            return Err(Error::invalid("calibrator widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = spec.node_width;
        let projections = groups
            .iter()
            .filter(|g| g.kind == ColumnKind::Categorical)
            .map(|g| DenseNet::glorot_with(&[g.range.len(), 1], &[Activation::Identity], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let numerical_embed =
            DenseNet::glorot_with(&[NODE_FEATURES, h], &[Activation::Relu], &mut rng)?;
        let categorical_embed =
            DenseNet::glorot_with(&[NODE_FEATURES, h], &[Activation::Relu], &mut rng)?;
        let message = (0..spec.message_layers)
            .map(|_| DenseNet::glorot_with(&[2 * h, h], &[Activation::Relu], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_in = h + num_classes + groups.len();
        let mut head = DenseNet::glorot_with(
            &[head_in, spec.head_hidden, 1],
            &[Activation::Relu, Activation::Softplus],
            &mut rng,
        )?;
        let last = &mut head.layers_mut()[1];
        last.weights.fill(S::zero());
        last.bias.fill(S::lit(unit_temperature_bias()));
        Ok(Self {
            spec,
            groups,
            num_classes,
            projections,
            numerical_embed,
            categorical_embed,
            message,
            head,
        })
    }

    pub fn spec(&self) -> &CalibratorSpec {
        &self.spec
    }

    pub fn groups(&self) -> &[EncodedGroup] {
        &self.groups
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn head_mut(&mut self) -> &mut DenseNet<S> {
        &mut self.head
    }

    pub fn num_params(&self) -> usize {
        self.projections.iter().map(DenseNet::num_params).sum::<usize>()
            + self.numerical_embed.num_params()
            + self.categorical_embed.num_params()
            + self.message.iter().map(DenseNet::num_params).sum::<usize>()
            + self.head.num_params()
    }

    fn check_inputs(&self, logits: &LogitsBatch<S>, trend: &ShiftTrend<S>) -> Result<()> {
        check_dim("calibrator classes", self.num_classes, logits.num_classes())?;
        check_dim("calibrator trend columns", self.groups.len(), trend.num_columns())?;
        check_dim("calibrator batch size", logits.len(), trend.batch_size())?;
        for (g, t) in self.groups.iter().zip(&trend.groups) {
            if g.kind != t.kind {
                return Err(Error::Schema(format!("trend column {} has the wrong kind", g.column)));
            }
            check_dim("calibrator trend width", g.range.len(), t.values.ncols())?;
            check_dim("calibrator trend rows", logits.len(), t.values.nrows())?;
        }
        if logits.is_empty() {
            return Err(Error::invalid("calibrator needs a non-empty batch"));
        }
        Ok(())
    }

    pub(crate) fn forward(
        &self,
        logits: &LogitsBatch<S>,
        trend: &ShiftTrend<S>,
    ) -> Result<(Vec<S>, CalibratorCache<S>)> {
        self.check_inputs(logits, trend)?;
        let n = logits.len();
        let d = self.groups.len();
        let nf = S::from_usize_lossy(n);

        // Projected trend, one row per column.
        let mut trend_rows = Array2::zeros((d, n));
        let mut proj_caches = Vec::with_capacity(d);
        let mut next_proj = 0;
        for (u, group) in trend.groups.iter().enumerate() {
            match group.kind {
                ColumnKind::Numerical => {
                    trend_rows.row_mut(u).assign(&group.values.column(0));
                    proj_caches.push(None);
                }
                ColumnKind::Categorical => {
                    let cache = self.projections[next_proj].forward(group.values.view())?;
                    trend_rows.row_mut(u).assign(&cache.output.column(0));
                    proj_caches.push(Some(cache));
                    next_proj += 1;
                }
            }
        }

        let mut features = Array2::zeros((d, NODE_FEATURES));
        for (u, row) in trend_rows.outer_iter().enumerate() {
            let mean = row.sum() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let min = row.iter().copied().fold(S::infinity(), S::min);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            features
                .row_mut(u)
                .assign(&Array1::from(vec![mean, var.sqrt(), min, max]));
        }

        let (numerical_rows, categorical_rows): (Vec<usize>, Vec<usize>) =
            (0..d).partition(|&u| self.groups[u].kind == ColumnKind::Numerical);
        let mut nodes = Array2::zeros((d, self.spec.node_width));
        let embed = |net: &DenseNet<S>, rows: &[usize], nodes: &mut Array2<S>| {
            if rows.is_empty() {
                return Ok(None);
            }
            let cache = net.forward(features.select(Axis(0), rows).view())?;
            for (k, &u) in rows.iter().enumerate() {
                nodes.row_mut(u).assign(&cache.output.row(k));
            }
            Ok::<_, Error>(Some(cache))
        };
        let numerical_embed = embed(&self.numerical_embed, &numerical_rows, &mut nodes)?;
        let categorical_embed = embed(&self.categorical_embed, &categorical_rows, &mut nodes)?;

        let df = S::from_usize_lossy(d);
        let mut message = Vec::with_capacity(self.message.len());
        for layer in &self.message {
            let pooled = nodes.sum_axis(Axis(0)) / df;
            let broadcast = pooled.broadcast((d, self.spec.node_width)).expect("broadcast");
            let input = concatenate(Axis(1), &[nodes.view(), broadcast]).expect("same rows");
            let cache = layer.forward(input.view())?;
            nodes = cache.output.clone();
            message.push(cache);
        }
        let pooled = nodes.sum_axis(Axis(0)) / df;

        let graph = pooled
            .broadcast((n, self.spec.node_width))
            .expect("broadcast")
            .to_owned();
        let head_input = concatenate(
            Axis(1),
            &[graph.view(), logits.logits.view(), trend_rows.t()],
        )
        .expect("same rows");
        let head = self.head.forward(head_input.view())?;
        let floor = S::lit(TEMPERATURE_FLOOR);
        let temps: Vec<S> = head.output.column(0).iter().map(|&v| v + floor).collect();
        if temps.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("calibrator temperatures".into()));
        }
        Ok((
            temps,
            CalibratorCache {
                projections: proj_caches,
                trend: trend_rows,
                numerical_rows,
                categorical_rows,
                numerical_embed,
                categorical_embed,
                message,
                head,
            },
        ))
    }

    /// Parameter gradients given `dL/dT_i` for every sample.
    pub(crate) fn backward(
        &self,
        cache: &CalibratorCache<S>,
        grad_temperatures: &[S],
    ) -> Result<CalibratorGradients<S>> {
        let (d, n) = cache.trend.dim();
        check_dim("temperature gradient", n, grad_temperatures.len())?;
        let h = self.spec.node_width;
        let nf = S::from_usize_lossy(n);
        let df = S::from_usize_lossy(d);

        let grad_out = Array2::from_shape_vec((n, 1), grad_temperatures.to_vec()).expect("shape");
        let (head, grad_head_in) = self.head.backward(&cache.head, grad_out.view())?;
        let grad_pooled = grad_head_in.slice(s![.., ..h]).sum_axis(Axis(0));
        let c = self.num_classes;
        // d L / d trend, D × N, from the per-sample head inputs.
        let mut grad_trend = grad_head_in.slice(s![.., h + c..]).t().to_owned();

        let mut grad_nodes = grad_pooled
            .broadcast((d, h))
            .expect("broadcast")
            .mapv(|v| v / df);
        let mut message = Vec::with_capacity(self.message.len());
        for (layer, layer_cache) in self.message.iter().zip(&cache.message).rev() {
            let (g, grad_in) = layer.backward(layer_cache, grad_nodes.view())?;
            let to_pool = grad_in.slice(s![.., h..]).sum_axis(Axis(0)) / df;
            grad_nodes = grad_in.slice(s![.., ..h]).to_owned() + &to_pool;
            message.push(g);
        }
        message.reverse();

        let mut grad_features = Array2::zeros((d, NODE_FEATURES));
        let mut embed_back = |net: &DenseNet<S>, rows: &[usize], ec: &Option<ForwardCache<S>>| {
            match ec {
                None => Ok::<_, Error>(Gradients::zeros_like(net)),
                Some(ec) => {
                    let upstream = grad_nodes.select(Axis(0), rows);
                    let (g, gi) = net.backward(ec, upstream.view())?;
                    for (k, &u) in rows.iter().enumerate() {
                        grad_features.row_mut(u).assign(&gi.row(k));
                    }
                    Ok(g)
                }
            }
        };
        let numerical_embed = embed_back(
            &self.numerical_embed,
            &cache.numerical_rows,
            &cache.numerical_embed,
        )?;
        let categorical_embed = embed_back(
            &self.categorical_embed,
            &cache.categorical_rows,
            &cache.categorical_embed,
        )?;

        for (u, row) in cache.trend.outer_iter().enumerate() {
            let mean = row.sum() / nf;
            let std = (row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf).sqrt();
            let argmin = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v < row[best] { i } else { best });
            let argmax = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            let gf = grad_features.row(u);
            for (i, &v) in row.iter().enumerate() {
                let mut g = gf[0] / nf;
                if std > S::zero() {
                    g += gf[1] * (v - mean) / (nf * std);
                }
                if i == argmin {
                    g += gf[2];
                }
                if i == argmax {
                    g += gf[3];
                }
                grad_trend[[u, i]] += g;
            }
        }

        let mut projections = Vec::with_capacity(self.projections.len());
        let mut next_proj = 0;
        for (u, pc) in cache.projections.iter().enumerate() {
            if let Some(pc) = pc {
                let upstream = grad_trend.row(u).to_owned().insert_axis(Axis(1));
                let (g, _) = self.projections[next_proj].backward(pc, upstream.view())?;
                projections.push(g);
                next_proj += 1;
            }
        }
        Ok(CalibratorGradients {
            projections,
            numerical_embed,
            categorical_embed,
            message,
            head,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64) -> Result<()> {
        let mut nets: Vec<(String, &DenseNet<S>)> = Vec::new();
        for (k, p) in self.projections.iter().enumerate() {
            nets.push((format!("projection.{k}"), p));
        }
        nets.push(("embed.numerical".into(), &self.numerical_embed));
        nets.push(("embed.categorical".into(), &self.categorical_embed));
        for (l, m) in self.message.iter().enumerate() {
            nets.push((format!("message.{l}"), m));
        }
        nets.push(("head".into(), &self.head));
        let named: Vec<(&str, &DenseNet<S>)> = nets.iter().map(|(n, p)| (n.as_str(), *p)).collect();
        let meta = serde_json::json!({
            "model": "shift_calibrator",
            "gamma": self.spec.loss.gamma,
            "lambda_cal": self.spec.loss.lambda_cal,
            "spec": self.spec,
            "groups": self.groups,
            "num_classes": self.num_classes,
            "temperature_floor": TEMPERATURE_FLOOR,
        });
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_params(file, seed, &named, meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let (header, nets) = read_params::<S, _>(file)?;
        if header.meta["model"] != "shift_calibrator" {
            return Err(Error::invalid("file does not hold a shift calibrator"));
        }
        let spec: CalibratorSpec = serde_json::from_value(header.meta["spec"].clone())?;
        let groups: Vec<EncodedGroup> = serde_json::from_value(header.meta["groups"].clone())?;
        let num_classes = header.meta["num_classes"]
            .as_u64()
            .ok_or_else(|| Error::invalid("missing num_classes"))? as usize;
        let mut projections = Vec::new();
        let mut message = Vec::new();
        let (mut numerical_embed, mut categorical_embed, mut head) = (None, None, None);
        for (name, net) in nets {
            match name.as_str() {
                "embed.numerical" => numerical_embed = Some(net),
                "embed.categorical" => categorical_embed = Some(net),
                "head" => head = Some(net),
                n if n.starts_with("projection.") => projections.push(net),
                n if n.starts_with("message.") => message.push(net),
                other => return Err(Error::invalid(format!("unexpected net `{other}`"))),
            }
        }
        let missing = || Error::invalid("calibrator file is missing a network");
        let calibrator = Self {
            spec,
            groups,
            num_classes,
            projections,
            numerical_embed: numerical_embed.ok_or_else(missing)?,
            categorical_embed: categorical_embed.ok_or_else(missing)?,
            message,
            head: head.ok_or_else(missing)?,
        };
        let expected = Self::new(
            calibrator.groups.clone(),
            num_classes,
            calibrator.spec.clone(),
            0,
        )?;
        if expected.num_params() != calibrator.num_params()
            || expected.message.len() != calibrator.message.len()
            || expected.projections.len() != calibrator.projections.len()
        {
            return Err(Error::invalid("calibrator file does not match its spec"));
        }
        Ok(calibrator)
    }

    /// Replaces the head's output layer (used to pin the network in tests).
    pub fn set_head_output(&mut self, layer: Dense<S>) -> Result<()> {
        let last = self.head.layers_mut().last_mut().expect("head has layers");
        check_dim("head output input width", last.input_dim(), layer.input_dim())?;
        check_dim("head output width", 1, layer.output_dim())?;
        *last = layer;
        Ok(())
    }

    /// Mean focal + λ·calibration loss of a labelled batch, with gradients in
    /// the order of [`Trainable::params_mut`].
    pub fn loss_and_gradients(
        &self,
        logits: &LogitsBatch<S>,
        trend: &ShiftTrend<S>,
        labels: &[usize],
    ) -> Result<(S, Vec<Vec<S>>)> {
        check_dim("calibrator labels", logits.len(), labels.len())?;
        let (temps, cache) = self.forward(logits, trend)?;
        let n = S::from_usize_lossy(labels.len());
        let mut total = S::zero();
        let mut grad_t = Vec::with_capacity(labels.len());
        for (k, &y) in labels.iter().enumerate() {
            let row = logits.logits.row(k);
            let (loss, dt) =
                tempered_loss_and_grad(row.as_slice().expect("contiguous row"), temps[k], y, self.spec.loss);
            if !loss.is_finite() || !dt.is_finite() {
                return Err(Error::NonFinite("calibrator loss".into()));
            }
            total += loss;
            grad_t.push(dt / n);
        }
        let grads = self.backward(&cache, &grad_t)?;
        Ok((total / n, grads.slices().into_iter().map(<[S]>::to_vec).collect()))
    }
}

impl<S: Scalar> TemperatureModel<S> for Calibrator<S> {
    fn temperatures(&self, logits: &LogitsBatch<S>, trend: &ShiftTrend<S>) -> Result<Vec<S>> {
        Ok(self.forward(logits, trend)?.0)
    }
}
