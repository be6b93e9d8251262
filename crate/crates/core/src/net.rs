//! Multilayer perceptron embedding network with hand-written backprop.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Kernel weights are projected back above this after every update.
pub const MIN_KERNEL_WEIGHT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// out x in
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub dropout: f64,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn xavier(inputs: usize, outputs: usize, activation: Activation, dropout: f64, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-limit..=limit)),
            bias: Array1::zeros(outputs),
            activation,
            dropout,
        }
    }
}

/// Layer sizes and dropout rates for [`MlpModel::new`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Widths of the ReLU hidden layers.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub hidden_dropout: f64,
    /// Dropout on the (linear) embedding layer output.
    pub embedding_dropout: f64,
    /// Appends a linear C-way softmax head when set.
    pub head_classes: Option<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 0,
            hidden: vec![64],
            embedding_dim: 16,
            hidden_dropout: 0.0,
            embedding_dropout: 0.0,
            head_classes: None,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        for rate in [self.hidden_dropout, self.embedding_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        if self.head_classes == Some(0) {
            return Err(Error::config("softmax head needs at least one class"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    head: Option<Layer>,
    generation: u64,
}

/// Activations recorded by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    /// Inverted-dropout multipliers (0 or 1/(1-rate)), when dropout ran.
    masks: Vec<Option<Array2<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradients {
    pub layers: Vec<LayerGradients>,
    pub head: Option<LayerGradients>,
}

impl ModelGradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        let z = |l: &Layer| LayerGradients {
            weight: Array2::zeros(l.weight.raw_dim()),
            bias: Array1::zeros(l.bias.len()),
        };
        Self {
            layers: model.layers.iter().map(z).collect(),
            head: model.head.as_ref().map(z),
        }
    }

    /// Same parameter order as [`MlpModel::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .chain(self.head.iter())
            .flat_map(|g| g.weight.iter().chain(g.bias.iter()).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&g| g == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub learn_kernel_weights: bool,
    pub freeze_network: bool,
    pub dropout_active: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 20,
            weight_decay: 0.0002,
            epochs: 50,
            seed: 0,
            learn_kernel_weights: true,
            freeze_network: false,
            dropout_active: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

impl MlpModel {
    /// Xavier-uniform weights and zero biases from the init stream of `seed`.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
        let mut width = spec.input_dim;
        for &h in &spec.hidden {
            layers.push(Layer::xavier(width, h, Activation::Relu, spec.hidden_dropout, &mut rng));
            width = h;
        }
        layers.push(Layer::xavier(
            width,
            spec.embedding_dim,
            Activation::None,
            spec.embedding_dropout,
            &mut rng,
        ));
        let head = spec
            .head_classes
            .map(|c| Layer::xavier(spec.embedding_dim, c, Activation::None, 0.0, &mut rng));
        Ok(Self {
            layers,
            head,
            generation: 0,
        })
    }

    /// A single linear layer that copies its input.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Layer {
                weight: Array2::eye(dim),
                bias: Array1::zeros(dim),
                activation: Activation::None,
                dropout: 0.0,
            }],
            head: None,
            generation: 0,
        }
    }

    pub fn from_layers(layers: Vec<Layer>, head: Option<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        for pair in layers.windows(2) {
            check_dims(pair[0].output_dim(), pair[1].input_dim())?;
        }
        for l in &layers {
            check_dims(l.output_dim(), l.bias.len())?;
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::config(format!("dropout rate {} outside [0, 1)", l.dropout)));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::None) {
            return Err(Error::config("embedding layer must be linear"));
        }
        if let Some(h) = &head {
            check_dims(layers.last().unwrap().output_dim(), h.input_dim())?;
            check_dims(h.output_dim(), h.bias.len())?;
        }
        Ok(Self {
            layers,
            head,
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> Option<&Layer> {
        self.head.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    /// Bumped every time parameters change; caches remember it.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .chain(self.head.iter())
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        check_dims(self.flat_params().len(), values.len())?;
        let mut it = values.iter();
        for l in self.layers.iter_mut().chain(self.head.iter_mut()) {
            for p in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *p = *it.next().expect("length checked");
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for l in self.layers.iter_mut().chain(self.head.iter_mut()) {
            l.weight.mapv_inplace(|v| v as f32 as f64);
            l.bias.mapv_inplace(|v| v as f32 as f64);
        }
        self.generation += 1;
    }

    pub fn forward(
        &self,
        input: ArrayView2<'_, f64>,
        dropout_active: bool,
        rng: &mut impl Rng,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        check_dims(self.input_dim(), input.ncols())?;
        let mut cache = ForwardCache {
            generation: self.generation,
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
        };
        let mut current = input.to_owned();
        for layer in &self.layers {
            let z = current.dot(&layer.weight.t()) + &layer.bias;
            let mut out = match layer.activation {
                Activation::Relu => z.mapv(|v| v.max(0.0)),
                Activation::None => z.clone(),
            };
            let mask = if dropout_active && layer.dropout > 0.0 {
                let keep = 1.0 - layer.dropout;
                let scale = 1.0 / keep;
                let m = Array2::from_shape_fn(out.raw_dim(), |_| if rng.random::<f64>() < keep { scale } else { 0.0 });
                out *= &m;
                Some(m)
            } else {
                None
            };
            cache.inputs.push(std::mem::replace(&mut current, out));
            cache.pre_activations.push(z);
            cache.masks.push(mask);
        }
        Ok((current, cache))
    }

    /// Embeddings with dropout disabled.
    pub fn embed(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dims(self.input_dim(), input.ncols())?;
        let mut current = input.to_owned();
        for layer in &self.layers {
            let mut z = current.dot(&layer.weight.t()) + &layer.bias;
            if layer.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            current = z;
        }
        Ok(current)
    }

    /// Backpropagates `upstream` (dL/d embedding, one row per example).
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<'_, f64>) -> Result<ModelGradients> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache {
                cached: cache.generation,
                current: self.generation,
            });
        }
        let rows = cache.inputs.first().map_or(0, |a| a.nrows());
        check_dims(rows, upstream.nrows())?;
        check_dims(self.embedding_dim(), upstream.ncols())?;
        let (layers, _) = self.backward_layers(cache, upstream.to_owned());
        Ok(ModelGradients { layers, head: None })
    }

    fn backward_layers(&self, cache: &ForwardCache, mut grad: Array2<f64>) -> (Vec<LayerGradients>, Array2<f64>) {
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(mask) = &cache.masks[i] {
                grad *= mask;
            }
            if layer.activation == Activation::Relu {
                grad.zip_mut_with(&cache.pre_activations[i], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let weight = grad.t().dot(&cache.inputs[i]);
            let bias = grad.sum_axis(Axis(0));
            grad = grad.dot(&layer.weight);
            out.push(LayerGradients { weight, bias });
        }
        out.reverse();
        (out, grad)
    }

    /// Head logits for inputs, dropout disabled.
    pub fn logits(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::config("model has no softmax head"))?;
        let emb = self.embed(input)?;
        Ok(emb.dot(&head.weight.t()) + &head.bias)
    }

    /// Mean softmax cross-entropy over the batch and its gradients.
    pub fn softmax_head_loss(
        &self,
        input: ArrayView2<'_, f64>,
        labels: &[usize],
        dropout_active: bool,
        rng: &mut impl Rng,
    ) -> Result<(f64, ModelGradients)> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::config("model has no softmax head"))?;
        check_dims(input.nrows(), labels.len())?;
        let classes = head.output_dim();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                num_classes: classes,
            });
        }
        let (emb, cache) = self.forward(input, dropout_active, rng)?;
        let logits = emb.dot(&head.weight.t()) + &head.bias;
        let (loss, d_logits) = softmax_cross_entropy(logits.view(), labels);
        let head_grads = LayerGradients {
            weight: d_logits.t().dot(&emb),
            bias: d_logits.sum_axis(Axis(0)),
        };
        let d_emb = d_logits.dot(&head.weight);
        let (layers, _) = self.backward_layers(&cache, d_emb);
        Ok((
            loss,
            ModelGradients {
                layers,
                head: Some(head_grads),
            },
        ))
    }

    pub(crate) fn bump_generation(&mut self) {
        self.generation += 1;
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.layers.iter_mut().chain(self.head.iter_mut())
    }
}

/// Mean cross-entropy and its gradient w.r.t. the logits, max-shifted.
pub fn softmax_cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows().max(1) as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let log_z = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss -= row[labels[i]] - log_z;
        for (c, &v) in row.iter().enumerate() {
            grad[[i, c]] = ((v - log_z).exp() - f64::from(u8::from(c == labels[i]))) / n;
        }
    }
    (loss / n, grad)
}

/// One SGD step: `p <- p - lr * (g + weight_decay * p)` on network
/// parameters unless frozen; kernel weights step without decay when
/// learned and are projected to at least [`MIN_KERNEL_WEIGHT`].
pub fn sgd_step(
    model: &mut MlpModel,
    kernel_weights: &mut [f64],
    grads: &ModelGradients,
    weight_grads: &BTreeMap<usize, f64>,
    cfg: &TrainConfig,
) {
    let lr = cfg.learning_rate;
    if !cfg.freeze_network {
        let wd = cfg.weight_decay;
        for (layer, g) in model.layers_mut().zip(grads.layers.iter().chain(grads.head.iter())) {
            layer.weight.zip_mut_with(&g.weight, |p, &g| *p -= lr * (g + wd * *p));
            layer.bias.zip_mut_with(&g.bias, |p, &g| *p -= lr * (g + wd * *p));
        }
        model.bump_generation();
    }
    if cfg.learn_kernel_weights {
        for (&id, &g) in weight_grads {
            let w = &mut kernel_weights[id];
            *w = (*w - lr * g).max(MIN_KERNEL_WEIGHT);
        }
    }
}
