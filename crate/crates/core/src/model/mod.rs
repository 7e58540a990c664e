//! The trainable mapping and its classifier head: a small configurable
//! convnet with hand-derived backward passes, the softmax negative
//! log-likelihood loss, and momentum SGD.
//!
//! Features for clustering are read at `feature_layer` (pre-ReLU when a
//! ReLU follows). The head is a plain linear layer sized to the current
//! cluster count; it is re-initialized whenever clusters are reassigned,
//! since assignments carry no identity across epochs.

mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use layers::*;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// One layer of the network body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm,
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        out: usize,
    },
    Dropout {
        p: f32,
    },
}

/// Network architecture: input shape, body layers, and the index of the
/// layer whose output is the feature representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// [C, H, W] after preprocessing (2 channels when the Sobel transform
    /// is enabled).
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub feature_layer: usize,
}

impl NetConfig {
    /// Two conv stages and a 64-d linear feature layer; small enough to
    /// train on a CPU yet deep enough to show layer-depth effects.
    pub fn desk_default(input_shape: [usize; 3]) -> Self {
        Self {
            input_shape,
            layers: vec![
                LayerSpec::Conv {
                    filters: 16,
                    kh: 3,
                    kw: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, stride: 2 },
                LayerSpec::Conv {
                    filters: 32,
                    kh: 3,
                    kw: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { out: 64 },
            ],
            feature_layer: 9,
        }
    }

    /// Output shape (without the batch dim) of every layer, in order.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            shape = match *spec {
                LayerSpec::Conv {
                    filters,
                    kh,
                    kw,
                    stride,
                    pad,
                } => {
                    let [c, h, w] = shape3(&shape, i, "conv")?;
                    let _ = c;
                    if h + 2 * pad < kh || w + 2 * pad < kw || stride < 1 {
                        return Err(Error::InvalidArg(format!(
                            "layer {i}: conv {kh}x{kw}/{stride} does not fit {h}x{w}"
                        )));
                    }
                    vec![
                        filters,
                        (h + 2 * pad - kh) / stride + 1,
                        (w + 2 * pad - kw) / stride + 1,
                    ]
                }
                LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Dropout { .. } => shape,
                LayerSpec::MaxPool { k, stride } => {
                    let [c, h, w] = shape3(&shape, i, "maxpool")?;
                    if h < k || w < k || stride < 1 {
                        return Err(Error::InvalidArg(format!(
                            "layer {i}: maxpool {k}/{stride} does not fit {h}x{w}"
                        )));
                    }
                    vec![c, (h - k) / stride + 1, (w - k) / stride + 1]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Linear { out } => {
                    if shape.len() != 1 {
                        return Err(Error::InvalidArg(format!(
                            "layer {i}: linear needs a flattened input, got {shape:?}"
                        )));
                    }
                    vec![out]
                }
            };
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    /// Flattened width of the feature representation.
    pub fn feature_dim(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        let fs = shapes
            .get(self.feature_layer)
            .ok_or_else(|| Error::InvalidArg("feature_layer out of range".into()))?;
        Ok(fs.iter().product())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArg("network has no layers".into()));
        }
        if self.feature_layer >= self.layers.len() {
            return Err(Error::InvalidArg(format!(
                "feature_layer {} out of range (have {} layers)",
                self.feature_layer,
                self.layers.len()
            )));
        }
        for (i, spec) in self.layers.iter().enumerate() {
            if let LayerSpec::Dropout { p } = spec {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::InvalidArg(format!(
                        "layer {i}: dropout p {p} out of [0,1)"
                    )));
                }
            }
        }
        self.layer_shapes().map(|_| ())
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::BatchNorm))
    }
}

fn shape3(shape: &[usize], layer: usize, what: &str) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::InvalidArg(format!(
            "layer {layer}: {what} wants [C,H,W], got {shape:?}"
        ))),
    }
}

/// A parameter tensor paired with its momentum slot.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub velocity: Tensor,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let velocity = Tensor::zeros(value.shape());
        Self { value, velocity }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum LayerState {
    Conv {
        w: Param,
        b: Param,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        gamma: Param,
        beta: Param,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        w: Param,
        b: Param,
    },
    Dropout {
        p: f32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Network parameters, momentum slots and batchnorm running statistics.
#[derive(Debug, Clone)]
pub struct NetState {
    pub config: NetConfig,
    pub(crate) layers: Vec<LayerState>,
    pub(crate) head_w: Param,
    pub(crate) head_b: Param,
    pub mode: Mode,
}

impl NetState {
    /// Initializes parameters: conv and linear weights from
    /// N(0, 2/fan_in), biases zero, batchnorm gamma 1 beta 0. The head is
    /// sized by [`reset_head`].
    pub fn new(config: NetConfig, head_k: usize, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        if head_k < 2 {
            return Err(Error::InvalidArg("head needs k >= 2".into()));
        }
        let shapes = config.layer_shapes()?;
        let mut in_shape: Vec<usize> = config.input_shape.to_vec();
        let mut layers = Vec::with_capacity(config.layers.len());
        for (spec, out_shape) in config.layers.iter().zip(&shapes) {
            let state = match *spec {
                LayerSpec::Conv {
                    filters,
                    kh,
                    kw,
                    stride,
                    pad,
                } => {
                    let c = in_shape[0];
                    let fan_in = c * kh * kw;
                    let mut w = Tensor::zeros(&[filters, c, kh, kw]);
                    w.fill_normal((2.0 / fan_in as f32).sqrt(), rng);
                    LayerState::Conv {
                        w: Param::new(w),
                        b: Param::new(Tensor::zeros(&[filters])),
                        stride,
                        pad,
                    }
                }
                LayerSpec::BatchNorm => {
                    let c = in_shape[0];
                    LayerState::BatchNorm {
                        gamma: Param::new(
                            Tensor::from_vec(&[c], vec![1.0; c]).expect("ones"),
                        ),
                        beta: Param::new(Tensor::zeros(&[c])),
                        running_mean: vec![0.0; c],
                        running_var: vec![1.0; c],
                    }
                }
                LayerSpec::Relu => LayerState::Relu,
                LayerSpec::MaxPool { k, stride } => LayerState::MaxPool { k, stride },
                LayerSpec::Flatten => LayerState::Flatten,
                LayerSpec::Linear { out } => {
                    let fan_in = in_shape.iter().product::<usize>();
                    let mut w = Tensor::zeros(&[fan_in, out]);
                    w.fill_normal((2.0 / fan_in as f32).sqrt(), rng);
                    LayerState::Linear {
                        w: Param::new(w),
                        b: Param::new(Tensor::zeros(&[out])),
                    }
                }
                LayerSpec::Dropout { p } => LayerState::Dropout { p },
            };
            layers.push(state);
            in_shape = out_shape.clone();
        }
        let last_dim: usize = in_shape.iter().product();
        let mut net = Self {
            config,
            layers,
            head_w: Param::new(Tensor::zeros(&[last_dim, 2])),
            head_b: Param::new(Tensor::zeros(&[2])),
            mode: Mode::Train,
        };
        reset_head(&mut net, head_k, rng)?;
        Ok(net)
    }

    /// Output dimension of the classifier head.
    pub fn head_dim(&self) -> usize {
        self.head_w.value.shape()[1]
    }

    /// Flattened width of the last body layer (the head's input).
    pub fn last_dim(&self) -> usize {
        self.head_w.value.shape()[0]
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Visits every state tensor (parameters, velocities, running stats)
    /// with a stable name, in a stable order. Used by checkpoints.
    pub fn visit_tensors<'a>(&'a self, mut f: impl FnMut(String, &'a [f32], &'a [usize])) {
        let scalar = &[0usize; 0][..];
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerState::Conv { w, b, .. } | LayerState::Linear { w, b } => {
                    f(format!("layer{i}.w"), w.value.data(), w.value.shape());
                    f(format!("layer{i}.w.v"), w.velocity.data(), w.velocity.shape());
                    f(format!("layer{i}.b"), b.value.data(), b.value.shape());
                    f(format!("layer{i}.b.v"), b.velocity.data(), b.velocity.shape());
                }
                LayerState::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    f(format!("layer{i}.gamma"), gamma.value.data(), gamma.value.shape());
                    f(
                        format!("layer{i}.gamma.v"),
                        gamma.velocity.data(),
                        gamma.velocity.shape(),
                    );
                    f(format!("layer{i}.beta"), beta.value.data(), beta.value.shape());
                    f(
                        format!("layer{i}.beta.v"),
                        beta.velocity.data(),
                        beta.velocity.shape(),
                    );
                    f(format!("layer{i}.running_mean"), running_mean, scalar);
                    f(format!("layer{i}.running_var"), running_var, scalar);
                }
                _ => {}
            }
        }
        f("head.w".into(), self.head_w.value.data(), self.head_w.value.shape());
        f(
            "head.w.v".into(),
            self.head_w.velocity.data(),
            self.head_w.velocity.shape(),
        );
        f("head.b".into(), self.head_b.value.data(), self.head_b.value.shape());
        f(
            "head.b.v".into(),
            self.head_b.velocity.data(),
            self.head_b.velocity.shape(),
        );
    }

    /// Copies `data` into the state tensor registered under `name` (the
    /// names produced by [`Self::visit_tensors`]). Lengths must match.
    pub fn load_tensor(&mut self, name: &str, data: &[f32]) -> Result<()> {
        let dst: &mut [f32] = match self.tensor_slot(name) {
            Some(slot) => slot,
            None => return Err(Error::Checkpoint(format!("unknown tensor {name:?}"))),
        };
        if dst.len() != data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?}: {} values for slot of {}",
                data.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(data);
        Ok(())
    }

    fn tensor_slot(&mut self, name: &str) -> Option<&mut [f32]> {
        if let Some(rest) = name.strip_prefix("head.") {
            return match rest {
                "w" => Some(self.head_w.value.data_mut()),
                "w.v" => Some(self.head_w.velocity.data_mut()),
                "b" => Some(self.head_b.value.data_mut()),
                "b.v" => Some(self.head_b.velocity.data_mut()),
                _ => None,
            };
        }
        let rest = name.strip_prefix("layer")?;
        let dot = rest.find('.')?;
        let idx: usize = rest[..dot].parse().ok()?;
        let field = &rest[dot + 1..];
        match self.layers.get_mut(idx)? {
            LayerState::Conv { w, b, .. } | LayerState::Linear { w, b } => match field {
                "w" => Some(w.value.data_mut()),
                "w.v" => Some(w.velocity.data_mut()),
                "b" => Some(b.value.data_mut()),
                "b.v" => Some(b.velocity.data_mut()),
                _ => None,
            },
            LayerState::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => match field {
                "gamma" => Some(gamma.value.data_mut()),
                "gamma.v" => Some(gamma.velocity.data_mut()),
                "beta" => Some(beta.value.data_mut()),
                "beta.v" => Some(beta.velocity.data_mut()),
                "running_mean" => Some(&mut running_mean[..]),
                "running_var" => Some(&mut running_var[..]),
                _ => None,
            },
            _ => None,
        }
    }

    /// Resizes the head to dimension `k` without initializing it; used by
    /// checkpoint loading before tensors are filled in.
    pub fn resize_head(&mut self, k: usize) {
        let d = self.head_w.value.shape()[0];
        self.head_w = Param::new(Tensor::zeros(&[d, k]));
        self.head_b = Param::new(Tensor::zeros(&[k]));
    }
}

/// Replaces the head with a freshly initialized linear layer of output
/// dimension `k`: weights from N(0, 2/fan_in), zero bias, zero momentum.
/// Body parameters are untouched.
pub fn reset_head(net: &mut NetState, k: usize, rng: &mut SeededRng) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidArg(format!("reset_head wants k >= 2, got {k}")));
    }
    let d = net.head_w.value.shape()[0];
    let mut w = Tensor::zeros(&[d, k]);
    w.fill_normal((2.0 / d as f32).sqrt(), rng);
    net.head_w = Param::new(w);
    net.head_b = Param::new(Tensor::zeros(&[k]));
    Ok(())
}

pub(crate) enum LayerCache {
    Conv { input: Tensor },
    BatchNorm(BnCache),
    Relu { input: Tensor },
    MaxPool(PoolCache),
    Flatten { input_shape: Vec<usize> },
    Linear { input: Tensor },
    Dropout { mask: Vec<f32> },
}

/// Per-forward intermediate state needed by the backward pass.
pub struct ForwardCache {
    pub(crate) layer_caches: Vec<LayerCache>,
    /// Flattened input to the head.
    pub(crate) head_input: Tensor,
    batch: usize,
}

/// A training mini-batch: inputs with pseudo-labels and per-example loss
/// weights.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub pseudo_labels: Vec<usize>,
    pub loss_weights: Vec<f32>,
}

impl Batch {
    pub fn new(inputs: Tensor, pseudo_labels: Vec<usize>, loss_weights: Vec<f32>) -> Result<Self> {
        let b = inputs.shape()[0];
        if pseudo_labels.len() != b || loss_weights.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "batch of {b} images with {} labels / {} weights",
                pseudo_labels.len(),
                loss_weights.len()
            )));
        }
        if !loss_weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::InvalidArg(
                "loss weights must be positive and finite".into(),
            ));
        }
        Ok(Self {
            inputs,
            pseudo_labels,
            loss_weights,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn flatten_batch(x: &Tensor) -> Tensor {
    let b = x.shape()[0];
    let d = x.len() / b;
    x.clone().reshape(&[b, d]).expect("volume preserved")
}

/// Runs the network in its current mode. Returns the caches for backward,
/// the features at `feature_layer` (flattened [B,d]), and the logits
/// [B,k]. In train mode batchnorm running statistics are updated and
/// dropout draws from `rng`.
pub fn forward(
    net: &mut NetState,
    inputs: &Tensor,
    rng: &mut SeededRng,
) -> Result<(ForwardCache, Tensor, Tensor)> {
    let train = net.mode == Mode::Train;
    let b = *inputs
        .shape()
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty input".into()))?;
    if inputs.shape()[1..] != net.config.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} does not match configured {:?}",
            &inputs.shape()[1..],
            net.config.input_shape
        )));
    }
    let mut x = inputs.clone();
    let mut caches = Vec::with_capacity(net.layers.len());
    let mut features: Option<Tensor> = None;
    let feature_layer = net.config.feature_layer;
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let (y, cache) = match layer {
            LayerState::Conv { w, b, stride, pad } => {
                let y = conv_forward(&x, &w.value, &b.value, *stride, *pad)?;
                (y, LayerCache::Conv { input: x })
            }
            LayerState::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let (y, cache) = bn_forward(
                    &x,
                    BnParamsRef {
                        gamma: gamma.value.data(),
                        beta: beta.value.data(),
                    },
                    running_mean,
                    running_var,
                    BN_EPS,
                    BN_MOMENTUM,
                    train,
                )?;
                (y, LayerCache::BatchNorm(cache))
            }
            LayerState::Relu => {
                let y = relu_forward(&x);
                (y, LayerCache::Relu { input: x })
            }
            LayerState::MaxPool { k, stride } => {
                let (y, cache) = maxpool_forward(&x, *k, *stride)?;
                (y, LayerCache::MaxPool(cache))
            }
            LayerState::Flatten => {
                let shape = x.shape().to_vec();
                let y = flatten_batch(&x);
                (y, LayerCache::Flatten { input_shape: shape })
            }
            LayerState::Linear { w, b } => {
                let y = linear_forward(&x, &w.value, &b.value)?;
                (y, LayerCache::Linear { input: x })
            }
            LayerState::Dropout { p } => {
                if train {
                    let (y, mask) = dropout_forward(&x, *p, rng);
                    (y, LayerCache::Dropout { mask })
                } else {
                    (x.clone(), LayerCache::Dropout { mask: Vec::new() })
                }
            }
        };
        if i == feature_layer {
            features = Some(flatten_batch(&y));
        }
        caches.push(cache);
        x = y;
    }
    let head_input = flatten_batch(&x);
    let logits = linear_forward(&head_input, &net.head_w.value, &net.head_b.value)?;
    logits.check_finite("forward logits")?;
    let features = features.expect("feature_layer validated in range");
    Ok((
        ForwardCache {
            layer_caches: caches,
            head_input,
            batch: b,
        },
        features,
        logits,
    ))
}

/// Eval-mode forward without caches; pure (no state mutation).
pub fn forward_eval(net: &NetState, inputs: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut snapshot = net.clone();
    snapshot.mode = Mode::Eval;
    let mut rng = SeededRng::new(0); // unused in eval mode
    let (_, features, logits) = forward(&mut snapshot, inputs, &mut rng)?;
    Ok((features, logits))
}

/// Eval-mode forward returning every layer's output (original shapes),
/// for per-layer probing. Pure.
pub fn forward_collect(net: &NetState, inputs: &Tensor) -> Result<Vec<Tensor>> {
    let mut snapshot = net.clone();
    snapshot.mode = Mode::Eval;
    let mut x = inputs.clone();
    let mut outputs = Vec::with_capacity(snapshot.layers.len());
    for layer in &mut snapshot.layers {
        x = match layer {
            LayerState::Conv { w, b, stride, pad } => {
                conv_forward(&x, &w.value, &b.value, *stride, *pad)?
            }
            LayerState::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                bn_forward(
                    &x,
                    BnParamsRef {
                        gamma: gamma.value.data(),
                        beta: beta.value.data(),
                    },
                    running_mean,
                    running_var,
                    BN_EPS,
                    BN_MOMENTUM,
                    false,
                )?
                .0
            }
            LayerState::Relu => relu_forward(&x),
            LayerState::MaxPool { k, stride } => maxpool_forward(&x, *k, *stride)?.0,
            LayerState::Flatten => flatten_batch(&x),
            LayerState::Linear { w, b } => linear_forward(&x, &w.value, &b.value)?,
            LayerState::Dropout { .. } => x,
        };
        outputs.push(x.clone());
    }
    Ok(outputs)
}

/// Softmax negative log-likelihood with per-example weights:
/// loss = sum_b w_b * (-log softmax(logits_b)[y_b]) / sum_b w_b.
/// Returns the loss and its exact gradient with respect to the logits.
pub fn softmax_nll_loss(
    logits: &Tensor,
    labels: &[usize],
    weights: &[f32],
) -> Result<(f32, Tensor)> {
    let &[b, k] = logits.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "loss wants [B,k] logits, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != b || weights.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{b} logit rows vs {} labels / {} weights",
            labels.len(),
            weights.len()
        )));
    }
    let mut weight_sum = 0.0f64;
    for &w in weights {
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::InvalidArg(format!("non-positive loss weight {w}")));
        }
        weight_sum += w as f64;
    }
    let mut dlogits = Tensor::zeros(&[b, k]);
    let mut total = 0.0f64;
    for bi in 0..b {
        let y = labels[bi];
        if y >= k {
            return Err(Error::InvalidArg(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let row = &logits.data()[bi * k..(bi + 1) * k];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum_exp = 0.0f64;
        for &v in row {
            sum_exp += ((v - max) as f64).exp();
        }
        let log_z = max as f64 + sum_exp.ln();
        total += weights[bi] as f64 * (log_z - row[y] as f64);
        let scale = weights[bi] as f64 / weight_sum;
        let drow = &mut dlogits.data_mut()[bi * k..(bi + 1) * k];
        for (j, dv) in drow.iter_mut().enumerate() {
            let p = ((row[j] - max) as f64).exp() / sum_exp;
            let indicator = if j == y { 1.0 } else { 0.0 };
            *dv = (scale * (p - indicator)) as f32;
        }
    }
    let loss = (total / weight_sum) as f32;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, dlogits))
}

/// Gradients for every parameter tensor, mirroring the network layout.
pub struct Grads {
    pub(crate) layers: Vec<Option<LayerGrads>>,
    pub(crate) head_w: Tensor,
    pub(crate) head_b: Tensor,
    /// Gradient with respect to the network input.
    pub input: Tensor,
}

pub(crate) enum LayerGrads {
    Conv { w: Tensor, b: Tensor },
    BatchNorm { gamma: Tensor, beta: Tensor },
    Linear { w: Tensor, b: Tensor },
}

/// Backpropagates `dlogits` through the head and every layer, using the
/// caches of the matching forward. Returns gradients for all parameters
/// and the input.
pub fn backward(net: &NetState, cache: &ForwardCache, dlogits: &Tensor) -> Result<Grads> {
    if cache.layer_caches.len() != net.layers.len() {
        return Err(Error::InvalidArg(
            "stale cache: layer count differs from network".into(),
        ));
    }
    if dlogits.shape() != [cache.batch, net.head_dim()] {
        return Err(Error::InvalidArg(format!(
            "stale cache: dlogits {:?} vs batch {} x head {}",
            dlogits.shape(),
            cache.batch,
            net.head_dim()
        )));
    }
    let (dhead_in, head_w, head_b) =
        linear_backward(&cache.head_input, &net.head_w.value, dlogits);
    let (layers, input) =
        backward_layers(net, cache, net.layers.len(), dhead_in)?;
    Ok(Grads {
        layers,
        head_w,
        head_b,
        input,
    })
}

/// Backpropagates an activation gradient from the output of layer
/// `from_layer` down to the input, skipping the head. Used by activation
/// maximization. Returns the input gradient.
pub fn backward_from_layer(
    net: &NetState,
    cache: &ForwardCache,
    from_layer: usize,
    dact: Tensor,
) -> Result<Tensor> {
    if from_layer >= net.layers.len() {
        return Err(Error::InvalidArg(format!(
            "layer {from_layer} out of range ({} layers)",
            net.layers.len()
        )));
    }
    let (_, input) = backward_layers(net, cache, from_layer + 1, dact)?;
    Ok(input)
}

/// Reverse walk over layers [0, upto), starting with gradient `dy` at the
/// output of layer upto-1.
fn backward_layers(
    net: &NetState,
    cache: &ForwardCache,
    upto: usize,
    mut dy: Tensor,
) -> Result<(Vec<Option<LayerGrads>>, Tensor)> {
    let mut grads: Vec<Option<LayerGrads>> = Vec::with_capacity(net.layers.len());
    grads.resize_with(net.layers.len(), || None);
    for (i, (layer, lcache)) in net
        .layers
        .iter()
        .zip(&cache.layer_caches)
        .enumerate()
        .take(upto)
        .rev()
    {
        dy = match (layer, lcache) {
            (LayerState::Conv { w, stride, pad, .. }, LayerCache::Conv { input }) => {
                // The incoming gradient may arrive flattened.
                let dy4 = reshape_like(&dy, &conv_out_shape(input, &w.value, *stride, *pad));
                let (dx, dw, db) = conv_backward(input, &w.value, &dy4, *stride, *pad);
                grads[i] = Some(LayerGrads::Conv { w: dw, b: db });
                dx
            }
            (LayerState::BatchNorm { gamma, .. }, LayerCache::BatchNorm(bn)) => {
                let dy_shaped = reshape_like(&dy, bn.xhat.shape());
                let (dx, dgamma, dbeta) = bn_backward(bn, gamma.value.data(), &dy_shaped);
                grads[i] = Some(LayerGrads::BatchNorm {
                    gamma: dgamma,
                    beta: dbeta,
                });
                dx
            }
            (LayerState::Relu, LayerCache::Relu { input }) => {
                let dy_shaped = reshape_like(&dy, input.shape());
                relu_backward(input, &dy_shaped)
            }
            (LayerState::MaxPool { .. }, LayerCache::MaxPool(pc)) => maxpool_backward(pc, &dy),
            (LayerState::Flatten, LayerCache::Flatten { input_shape }) => {
                reshape_like(&dy, input_shape)
            }
            (LayerState::Linear { w, .. }, LayerCache::Linear { input }) => {
                let (dx, dw, db) = linear_backward(input, &w.value, &dy);
                grads[i] = Some(LayerGrads::Linear { w: dw, b: db });
                dx
            }
            (LayerState::Dropout { .. }, LayerCache::Dropout { mask }) => {
                dropout_backward(mask, &dy)
            }
            _ => {
                return Err(Error::InvalidArg(format!(
                    "stale cache: layer {i} kind mismatch"
                )))
            }
        };
    }
    Ok((grads, dy))
}

fn conv_out_shape(input: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<usize> {
    let &[b, _, h, wd] = input.shape() else { unreachable!() };
    let &[f, _, kh, kw] = w.shape() else { unreachable!() };
    vec![
        b,
        f,
        (h + 2 * pad - kh) / stride + 1,
        (wd + 2 * pad - kw) / stride + 1,
    ]
}

fn reshape_like(t: &Tensor, shape: &[usize]) -> Tensor {
    t.clone().reshape(shape).expect("backward volume preserved")
}

/// Momentum SGD with decoupled-from-nothing classic L2 penalty folded into
/// the gradient: v <- momentum*v + g + wd*theta; theta <- theta - lr*v.
/// Weight decay applies to conv and linear weights only (biases and
/// batchnorm parameters are exempt).
pub fn sgd_step(
    net: &mut NetState,
    grads: &Grads,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidArg("sgd wants lr > 0".into()));
    }
    fn update(p: &mut Param, g: &Tensor, lr: f32, momentum: f32, wd: f32) -> Result<()> {
        if g.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "sgd: grad {:?} vs param {:?}",
                g.shape(),
                p.value.shape()
            )));
        }
        g.check_finite("sgd gradient")?;
        for ((v, &gv), pv) in p
            .velocity
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(p.value.data().iter())
        {
            *v = momentum * *v + gv + wd * *pv;
        }
        for (pv, &v) in p.value.data_mut().iter_mut().zip(p.velocity.data()) {
            *pv -= lr * v;
        }
        Ok(())
    }

    for (layer, grad) in net.layers.iter_mut().zip(&grads.layers) {
        match (layer, grad) {
            (LayerState::Conv { w, b, .. }, Some(LayerGrads::Conv { w: gw, b: gb }))
            | (LayerState::Linear { w, b }, Some(LayerGrads::Linear { w: gw, b: gb })) => {
                update(w, gw, lr, momentum, weight_decay)?;
                update(b, gb, lr, momentum, 0.0)?;
            }
            (
                LayerState::BatchNorm { gamma, beta, .. },
                Some(LayerGrads::BatchNorm {
                    gamma: gg,
                    beta: gb,
                }),
            ) => {
                update(gamma, gg, lr, momentum, 0.0)?;
                update(beta, gb, lr, momentum, 0.0)?;
            }
            (_, None) => {}
            _ => return Err(Error::InvalidArg("sgd: grads do not match layers".into())),
        }
    }
    update(&mut net.head_w, &grads.head_w, lr, momentum, weight_decay)?;
    update(&mut net.head_b, &grads.head_b, lr, momentum, 0.0)?;
    Ok(())
}

#[cfg(test)]
mod tests;
