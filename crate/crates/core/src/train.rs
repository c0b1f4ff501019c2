//! Backpropagation and plain SGD with momentum. Gradients are reduced over
//! each batch in example order regardless of how the per-example work is
//! scheduled, so training is bit-reproducible for a fixed seed.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{
    affine_backward, affine_forward, conv2d_backward, conv2d_forward, maxpool, maxpool_backward,
    relu, relu_backward, softmax_cross_entropy,
};
use crate::network::{Layer, LayerOp, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid("train_sgd", "learning_rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train_sgd", "momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train_sgd", "batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Gradient storage, shaped like the layer stack
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum LayerGrads<T> {
    None,
    Pair { weights: Tensor<T>, bias: Tensor<T> },
    Block(Vec<LayerGrads<T>>),
}

type Grads<T> = Vec<LayerGrads<T>>;

fn zero_grads<T: Scalar>(layers: &[Layer<T>]) -> Grads<T> {
    layers
        .iter()
        .map(|layer| match &layer.op {
            LayerOp::Conv { weights, bias, .. } | LayerOp::Affine { weights, bias } => {
                LayerGrads::Pair {
                    weights: Tensor::zeros(weights.shape().to_vec()),
                    bias: Tensor::zeros(bias.shape().to_vec()),
                }
            }
            LayerOp::Residual { branch2 } => LayerGrads::Block(zero_grads(branch2)),
            _ => LayerGrads::None,
        })
        .collect()
}

fn add_grads<T: Scalar>(acc: &mut Grads<T>, other: &Grads<T>) {
    for (a, b) in acc.iter_mut().zip(other) {
        match (a, b) {
            (
                LayerGrads::Pair { weights: aw, bias: ab },
                LayerGrads::Pair { weights: bw, bias: bb },
            ) => {
                for (x, y) in aw.data_mut().iter_mut().zip(bw.data()) {
                    *x += *y;
                }
                for (x, y) in ab.data_mut().iter_mut().zip(bb.data()) {
                    *x += *y;
                }
            }
            (LayerGrads::Block(a), LayerGrads::Block(b)) => add_grads(a, b),
            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Cached forward / backward
// ---------------------------------------------------------------------------

enum Cache<T> {
    Conv { input: Tensor<T> },
    Relu { input: Tensor<T> },
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
    Affine { input: Tensor<T> },
    Residual { sum: Tensor<T>, inner: Vec<Cache<T>> },
}

fn forward_cached<T: Scalar>(layers: &[Layer<T>], x: Tensor<T>) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x;
    for layer in layers {
        let ctx = |e: Error| e.in_context(&format!("layer '{}'", layer.id));
        match &layer.op {
            LayerOp::Conv { weights, bias, params } => {
                let out = conv2d_forward(&cur, weights, bias, *params).map_err(ctx)?;
                caches.push(Cache::Conv { input: cur });
                cur = out;
            }
            LayerOp::Relu => {
                let out = relu(&cur);
                caches.push(Cache::Relu { input: cur });
                cur = out;
            }
            LayerOp::MaxPool { window, stride } => {
                let pooled = maxpool(&cur, *window, *stride).map_err(ctx)?;
                caches.push(Cache::Pool { input_shape: cur.shape().to_vec(), argmax: pooled.argmax });
                cur = pooled.output;
            }
            LayerOp::Flatten => {
                caches.push(Cache::Flatten { input_shape: cur.shape().to_vec() });
                cur = cur.reshape(vec![cur.len()])?;
            }
            LayerOp::Affine { weights, bias } => {
                let out = affine_forward(&cur, weights, bias).map_err(ctx)?;
                caches.push(Cache::Affine { input: cur });
                cur = out;
            }
            LayerOp::Residual { branch2 } => {
                let (branch_out, inner) = forward_cached(branch2, cur.clone())?;
                let sum = cur.add(&branch_out).map_err(ctx)?;
                let out = relu(&sum);
                caches.push(Cache::Residual { sum, inner });
                cur = out;
            }
        }
    }
    Ok((cur, caches))
}

fn backward<T: Scalar>(
    layers: &[Layer<T>],
    caches: &[Cache<T>],
    mut upstream: Tensor<T>,
    grads: &mut Grads<T>,
) -> Result<Tensor<T>> {
    for idx in (0..layers.len()).rev() {
        let layer = &layers[idx];
        upstream = match (&layer.op, &caches[idx]) {
            (LayerOp::Conv { weights, params, .. }, Cache::Conv { input }) => {
                let (gi, gw, gb) = conv2d_backward(input, weights, *params, &upstream)?;
                if let LayerGrads::Pair { weights: aw, bias: ab } = &mut grads[idx] {
                    for (x, y) in aw.data_mut().iter_mut().zip(gw.data()) {
                        *x += *y;
                    }
                    for (x, y) in ab.data_mut().iter_mut().zip(gb.data()) {
                        *x += *y;
                    }
                }
                gi
            }
            (LayerOp::Relu, Cache::Relu { input }) => relu_backward(input, &upstream)?,
            (LayerOp::MaxPool { .. }, Cache::Pool { input_shape, argmax }) => {
                maxpool_backward(input_shape, argmax, &upstream)?
            }
            (LayerOp::Flatten, Cache::Flatten { input_shape }) => {
                upstream.reshape(input_shape.clone())?
            }
            (LayerOp::Affine { weights, .. }, Cache::Affine { input }) => {
                let (gx, gw, gb) = affine_backward(input, weights, &upstream)?;
                if let LayerGrads::Pair { weights: aw, bias: ab } = &mut grads[idx] {
                    for (x, y) in aw.data_mut().iter_mut().zip(gw.data()) {
                        *x += *y;
                    }
                    for (x, y) in ab.data_mut().iter_mut().zip(gb.data()) {
                        *x += *y;
                    }
                }
                gx
            }
            (LayerOp::Residual { branch2 }, Cache::Residual { sum, inner }) => {
                let ds = relu_backward(sum, &upstream)?;
                let inner_grads = match &mut grads[idx] {
                    LayerGrads::Block(g) => g,
                    _ => unreachable!("grads mirror the layer stack"),
                };
                let db = backward(branch2, inner, ds.clone(), inner_grads)?;
                ds.add(&db)?
            }
            _ => unreachable!("cache mirrors the layer stack"),
        };
    }
    Ok(upstream)
}

/// Loss and parameter gradients for one example.
fn example_grads<T: Scalar>(
    net: &Network<T>,
    image: &Tensor<T>,
    label: usize,
) -> Result<(f64, Grads<T>)> {
    let (logits, caches) = forward_cached(&net.layers, image.clone())?;
    let (loss, grad_logits) = softmax_cross_entropy(&logits, label)?;
    let mut grads = zero_grads(&net.layers);
    backward(&net.layers, &caches, grad_logits, &mut grads)?;
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

fn sgd_step<T: Scalar>(
    layers: &mut [Layer<T>],
    grads: &Grads<T>,
    velocity: &mut Grads<T>,
    lr: f64,
    momentum: f64,
    scale: f64,
    frozen: &BTreeSet<&str>,
) {
    for ((layer, grad), vel) in layers.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let skip = frozen.contains(layer.id.as_str());
        match (&mut layer.op, grad, vel) {
            (
                LayerOp::Conv { weights, bias, .. } | LayerOp::Affine { weights, bias },
                LayerGrads::Pair { weights: gw, bias: gb },
                LayerGrads::Pair { weights: vw, bias: vb },
            ) => {
                if skip {
                    continue;
                }
                let update = |param: &mut Tensor<T>, grad: &Tensor<T>, vel: &mut Tensor<T>| {
                    for ((p, &g), v) in
                        param.data_mut().iter_mut().zip(grad.data()).zip(vel.data_mut())
                    {
                        let vnew = momentum * v.to_acc() - lr * g.to_acc() * scale;
                        *v = T::from_acc(vnew);
                        *p = T::from_acc(p.to_acc() + vnew);
                    }
                };
                update(weights, gw, vw);
                update(bias, gb, vb);
            }
            (LayerOp::Residual { branch2 }, LayerGrads::Block(g), LayerGrads::Block(v)) => {
                if skip {
                    continue;
                }
                sgd_step(branch2, g, v, lr, momentum, scale, frozen);
            }
            _ => {}
        }
    }
}

/// Weight positions (flat index into each named layer's weight tensor) pinned
/// to zero throughout training; their momentum is cleared too, so a masked
/// position can never drift away from zero.
#[derive(Debug, Clone, Default)]
pub struct WeightMasks(pub BTreeMap<String, Vec<bool>>);

impl WeightMasks {
    /// Freeze every currently-zero weight of the named layers — the natural
    /// mask right after magnitude pruning.
    pub fn from_zeros<T: Scalar>(net: &Network<T>, layer_ids: &[&str]) -> Result<Self> {
        let mut masks = BTreeMap::new();
        for &id in layer_ids {
            let mut found = None;
            let mut visit = |layer: &Layer<T>| {
                if layer.id == id {
                    if let LayerOp::Conv { weights, .. } | LayerOp::Affine { weights, .. } =
                        &layer.op
                    {
                        found = Some(weights.data().iter().map(|v| *v == T::zero()).collect());
                    }
                }
            };
            for layer in &net.layers {
                visit(layer);
                if let LayerOp::Residual { branch2 } = &layer.op {
                    for inner in branch2 {
                        visit(inner);
                    }
                }
            }
            match found {
                Some(mask) => {
                    masks.insert(id.to_string(), mask);
                }
                None => return Err(Error::LayerNotFound(id.to_string())),
            }
        }
        Ok(WeightMasks(masks))
    }

    fn validate<T: Scalar>(&self, net: &Network<T>) -> Result<()> {
        for (id, mask) in &self.0 {
            let mut len = None;
            let mut visit = |layer: &Layer<T>| {
                if &layer.id == id {
                    if let LayerOp::Conv { weights, .. } | LayerOp::Affine { weights, .. } =
                        &layer.op
                    {
                        len = Some(weights.len());
                    }
                }
            };
            for layer in &net.layers {
                visit(layer);
                if let LayerOp::Residual { branch2 } = &layer.op {
                    for inner in branch2 {
                        visit(inner);
                    }
                }
            }
            match len {
                Some(n) if n == mask.len() => {}
                Some(n) => {
                    return Err(Error::invalid(
                        "train_sgd",
                        format!("mask for '{id}' has {} entries, layer has {n} weights", mask.len()),
                    ))
                }
                None => return Err(Error::LayerNotFound(id.clone())),
            }
        }
        Ok(())
    }
}

fn apply_masks<T: Scalar>(layers: &mut [Layer<T>], velocity: &mut Grads<T>, masks: &WeightMasks) {
    for (layer, vel) in layers.iter_mut().zip(velocity.iter_mut()) {
        match (&mut layer.op, vel) {
            (
                LayerOp::Conv { weights, .. } | LayerOp::Affine { weights, .. },
                LayerGrads::Pair { weights: vw, .. },
            ) => {
                if let Some(mask) = masks.0.get(layer.id.as_str()) {
                    for ((p, v), &m) in
                        weights.data_mut().iter_mut().zip(vw.data_mut()).zip(mask)
                    {
                        if m {
                            *p = T::zero();
                            *v = T::zero();
                        }
                    }
                }
            }
            (LayerOp::Residual { branch2 }, LayerGrads::Block(v)) => {
                apply_masks(branch2, v, masks)
            }
            _ => {}
        }
    }
}

fn train_inner<T: Scalar>(
    net: &Network<T>,
    train: &Dataset<T>,
    cfg: &SgdConfig,
    frozen: &BTreeSet<&str>,
    masks: Option<&WeightMasks>,
) -> Result<(Network<T>, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset { op: "train_sgd" });
    }
    if let Some(m) = masks {
        m.validate(net)?;
    }
    let mut net = net.clone();
    let mut velocity = zero_grads(&net.layers);
    if let Some(m) = masks {
        apply_masks(&mut net.layers, &mut velocity, m);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            // parallel per-example work, then an ordered sequential reduction
            let results: Vec<(f64, Grads<T>)> = batch
                .par_iter()
                .map(|&i| example_grads(&net, train.image(i), train.label(i)))
                .collect::<Result<_>>()?;
            let mut batch_loss = 0.0;
            let mut grads = zero_grads(&net.layers);
            for (loss, g) in &results {
                batch_loss += loss;
                add_grads(&mut grads, g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: batch_idx });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            sgd_step(&mut net.layers, &grads, &mut velocity, cfg.learning_rate, cfg.momentum, scale, frozen);
            if let Some(m) = masks {
                apply_masks(&mut net.layers, &mut velocity, m);
            }
        }
        log.epoch_loss.push(epoch_loss / train.len() as f64);
    }
    Ok((net, log))
}

/// SGD with momentum. Layers whose id is in `frozen` (a whole residual block
/// may be named) keep their parameters untouched — used to fine-tune around
/// an ablated layer without resurrecting it.
pub fn train_sgd_frozen<T: Scalar>(
    net: &Network<T>,
    train: &Dataset<T>,
    cfg: &SgdConfig,
    frozen: &BTreeSet<&str>,
) -> Result<(Network<T>, TrainLog)> {
    train_inner(net, train, cfg, frozen, None)
}

/// SGD that keeps masked weight positions at exactly zero — retraining the
/// survivors of magnitude pruning without resurrecting the pruned ones.
pub fn train_sgd_masked<T: Scalar>(
    net: &Network<T>,
    train: &Dataset<T>,
    cfg: &SgdConfig,
    masks: &WeightMasks,
) -> Result<(Network<T>, TrainLog)> {
    train_inner(net, train, cfg, &BTreeSet::new(), Some(masks))
}

pub fn train_sgd<T: Scalar>(
    net: &Network<T>,
    train: &Dataset<T>,
    cfg: &SgdConfig,
) -> Result<(Network<T>, TrainLog)> {
    train_inner(net, train, cfg, &BTreeSet::new(), None)
}

/// Mean cross-entropy loss over a dataset, without touching the network.
pub fn mean_loss<T: Scalar>(net: &Network<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset { op: "mean_loss" });
    }
    let total: f64 = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let logits = net.forward(data.image(i))?;
            Ok(softmax_cross_entropy(&logits, data.label(i))?.0)
        })
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();
    Ok(total / data.len() as f64)
}
