use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, Trainable};
use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(S::zero()),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Identity => S::one(),
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S> {
    /// `input_dim × output_dim`.
    pub weights: Array2<S>,
    pub bias: Array1<S>,
    pub activation: Activation,
}

impl<S: Scalar> Dense<S> {
    pub fn zeros(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Array2::zeros((input_dim, output_dim)),
            bias: Array1::zeros(output_dim),
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (input_dim + output_dim) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((input_dim, output_dim), || {
            S::lit(rng.random_range(-limit..=limit))
        });
        Self {
            weights,
            bias: Array1::zeros(output_dim),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn pre_activation(&self, x: &ArrayView2<S>) -> Array2<S> {
        x.dot(&self.weights) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<S> {
    layers: Vec<Dense<S>>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    inputs: Vec<Array2<S>>,
    pre: Vec<Array2<S>>,
    pub output: Array2<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient<S> {
    pub weights: Array2<S>,
    pub bias: Array1<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub layers: Vec<LayerGradient<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(net: &DenseNet<S>) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGradient {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Euclidean norm of each layer's gradient (weights and bias together).
    pub fn norms(&self) -> Vec<S> {
        self.layers
            .iter()
            .map(|g| {
                let sq: S = g.weights.iter().chain(g.bias.iter()).map(|&v| v * v).sum();
                sq.sqrt()
            })
            .collect()
    }

    pub fn accumulate(&mut self, other: &Gradients<S>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn slices(&self) -> Vec<&[S]> {
        self.layers
            .iter()
            .flat_map(|g| {
                [
                    g.weights.as_slice().expect("standard layout"),
                    g.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn check_finite(&self) -> Result<()> {
        for (l, g) in self.layers.iter().enumerate() {
            if g.weights.iter().chain(g.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {l}")));
            }
        }
        Ok(())
    }
}

impl<S: Scalar> DenseNet<S> {
    pub fn from_layers(layers: Vec<Dense<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            check_dim("layer composition", pair[0].output_dim(), pair[1].input_dim())?;
        }
        let net = Self { layers };
        if !net.is_finite() {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(net)
    }

    /// `dims` lists input, hidden and output widths; `activations` has one
    /// entry per layer.
    pub fn glorot(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::glorot_with(dims, activations, &mut rng)
    }

    pub fn glorot_with<R: Rng>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        check_dim("activation count", dims.len().saturating_sub(1), activations.len())?;
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &act)| Dense::glorot(d[0], d[1], act, rng))
            .collect();
        Self::from_layers(layers)
    }

    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        check_dim("activation count", dims.len().saturating_sub(1), activations.len())?;
        Self::from_layers(
            dims.windows(2)
                .zip(activations)
                .map(|(d, &act)| Dense::zeros(d[0], d[1], act))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Dense<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<S>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Inference-only forward pass.
    pub fn predict(&self, inputs: ArrayView2<S>) -> Result<Array2<S>> {
        check_dim("network input", self.input_dim(), inputs.ncols())?;
        let mut x = inputs.to_owned();
        for layer in &self.layers {
            let act = layer.activation;
            x = layer.pre_activation(&x.view()).mapv_into(|v| act.apply(v));
        }
        Ok(x)
    }

    pub fn forward(&self, inputs: ArrayView2<S>) -> Result<ForwardCache<S>> {
        check_dim("network input", self.input_dim(), inputs.ncols())?;
        let mut cache_inputs = Vec::with_capacity(self.layers.len());
        let mut cache_pre = Vec::with_capacity(self.layers.len());
        let mut x = inputs.to_owned();
        for layer in &self.layers {
            let pre = layer.pre_activation(&x.view());
            let act = layer.activation;
            let out = pre.mapv(|v| act.apply(v));
            cache_inputs.push(x);
            cache_pre.push(pre);
            x = out;
        }
        Ok(ForwardCache {
            inputs: cache_inputs,
            pre: cache_pre,
            output: x,
        })
    }

    /// Parameter gradients and the gradient with respect to the inputs.
    pub fn backward(
        &self,
        cache: &ForwardCache<S>,
        grad_output: ArrayView2<S>,
    ) -> Result<(Gradients<S>, Array2<S>)> {
        check_dim("output gradient rows", cache.output.nrows(), grad_output.nrows())?;
        check_dim("output gradient cols", self.output_dim(), grad_output.ncols())?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_output.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            let mut delta = upstream;
            ndarray::Zip::from(&mut delta)
                .and(&cache.pre[l])
                .for_each(|d, &z| *d *= act.derivative(z));
            let weights = cache.inputs[l].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            upstream = delta.dot(&layer.weights.t());
            grads.push(LayerGradient { weights, bias });
        }
        grads.reverse();
        let grads = Gradients { layers: grads };
        grads.check_finite()?;
        if upstream.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient of network input".into()));
        }
        Ok((grads, upstream))
    }

    /// Backward pass followed by one optimizer step. Returns per-layer gradient norms.
    pub fn backward_and_step(
        &mut self,
        cache: &ForwardCache<S>,
        grad_output: ArrayView2<S>,
        optimizer: &mut Optimizer<S>,
    ) -> Result<Vec<S>> {
        let (grads, _) = self.backward(cache, grad_output)?;
        let norms = grads.norms();
        optimizer.step(self, &grads.slices())?;
        Ok(norms)
    }
}

impl<S: Scalar> Trainable<S> for DenseNet<S> {
    fn params_mut(&mut self) -> Vec<&mut [S]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}
