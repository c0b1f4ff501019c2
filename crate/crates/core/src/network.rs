//! The layer graph: sequential chains plus residual blocks, built from an
//! architecture config, with forward evaluation and top-1 accuracy metrics.

use crate::arch::{ArchConfig, LayerKind, LayerSpec, ARCH_SCHEMA};
use crate::error::{Error, Result};
use crate::kernels::{affine_forward, conv2d_forward, maxpool, relu, ConvParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub enum LayerOp<T> {
    Conv { weights: Tensor<T>, bias: Tensor<T>, params: ConvParams },
    Relu,
    MaxPool { window: usize, stride: usize },
    Flatten,
    Affine { weights: Tensor<T>, bias: Tensor<T> },
    /// branch2 feeds from the block input; output = relu(input + branch2(input)).
    Residual { branch2: Vec<Layer<T>> },
}

#[derive(Debug, Clone)]
pub struct Layer<T> {
    pub id: String,
    pub op: LayerOp<T>,
}

#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub layers: Vec<Layer<T>>,
}

fn init_tensor<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    // He initialization, sampled in f64 and narrowed, so f32/f64 nets built
    // from one seed share the same underlying draw sequence.
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is finite");
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_acc(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape is valid")
}

fn build_layers<T: Scalar>(
    specs: &[LayerSpec],
    mut shape: Vec<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Layer<T>>, Vec<usize>)> {
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let id = spec.id.clone();
        let op = match spec.kind {
            LayerKind::Conv => {
                if shape.len() != 3 {
                    return Err(Error::config(format!(
                        "layer '{id}': conv requires a rank-3 input, got {shape:?}"
                    )));
                }
                let filters = spec.filters.unwrap();
                let kernel = spec.kernel.unwrap();
                let params = ConvParams::new(spec.stride.unwrap_or(1), spec.padding.unwrap_or(0))?;
                let fan_in = shape[0] * kernel * kernel;
                let weights = init_tensor(&[filters, shape[0], kernel, kernel], fan_in, rng);
                let bias = Tensor::zeros([filters]);
                LayerOp::Conv { weights, bias, params }
            }
            LayerKind::Relu => LayerOp::Relu,
            LayerKind::Maxpool => {
                let window = spec.window.unwrap();
                LayerOp::MaxPool { window, stride: spec.stride.unwrap_or(window) }
            }
            LayerKind::Flatten => LayerOp::Flatten,
            LayerKind::Affine => {
                if shape.len() != 1 {
                    return Err(Error::config(format!(
                        "layer '{id}': affine requires a flattened input, got {shape:?}"
                    )));
                }
                let units = spec.units.unwrap();
                let weights = init_tensor(&[units, shape[0]], shape[0], rng);
                let bias = Tensor::zeros([units]);
                LayerOp::Affine { weights, bias }
            }
            LayerKind::ResidualBlock => {
                let specs = spec.branch2.as_deref().unwrap();
                let (branch2, out_shape) = build_layers(specs, shape.clone(), rng)?;
                if out_shape != shape {
                    return Err(Error::config(format!(
                        "layer '{id}': branch2 output {out_shape:?} must match block input {shape:?}"
                    )));
                }
                LayerOp::Residual { branch2 }
            }
        };
        let layer = Layer { id, op };
        shape = op_output_shape(&layer, &shape)?;
        layers.push(layer);
    }
    Ok((layers, shape))
}

/// Output shape of one layer given its input shape; all dimension errors
/// name the offending layer.
pub fn op_output_shape<T: Scalar>(layer: &Layer<T>, input: &[usize]) -> Result<Vec<usize>> {
    let id = &layer.id;
    let rank3 = |what: &str| -> Result<(usize, usize, usize)> {
        if input.len() == 3 {
            Ok((input[0], input[1], input[2]))
        } else {
            Err(Error::shape(
                "network",
                format!("layer '{id}': {what} requires a rank-3 input, got {input:?}"),
            ))
        }
    };
    match &layer.op {
        LayerOp::Conv { weights, bias, params } => {
            let (c, h, w) = rank3("conv")?;
            let k = weights.shape()[2];
            if weights.shape()[1] != c {
                return Err(Error::shape(
                    "network",
                    format!(
                        "layer '{id}': input channel axis is {c}, weights expect {}",
                        weights.shape()[1]
                    ),
                ));
            }
            if weights.shape()[0] != bias.len() {
                return Err(Error::shape(
                    "network",
                    format!(
                        "layer '{id}': {} filters vs bias length {}",
                        weights.shape()[0],
                        bias.len()
                    ),
                ));
            }
            let oh = crate::kernels::out_extent(h, k, params.stride, params.padding, "height")
                .map_err(|e| e.in_context(&format!("layer '{id}'")))?;
            let ow = crate::kernels::out_extent(w, k, params.stride, params.padding, "width")
                .map_err(|e| e.in_context(&format!("layer '{id}'")))?;
            Ok(vec![weights.shape()[0], oh, ow])
        }
        LayerOp::Relu => Ok(input.to_vec()),
        LayerOp::MaxPool { window, stride } => {
            let (c, h, w) = rank3("maxpool")?;
            let oh = crate::kernels::out_extent(h, *window, *stride, 0, "height")
                .map_err(|e| e.in_context(&format!("layer '{id}'")))?;
            let ow = crate::kernels::out_extent(w, *window, *stride, 0, "width")
                .map_err(|e| e.in_context(&format!("layer '{id}'")))?;
            Ok(vec![c, oh, ow])
        }
        LayerOp::Flatten => Ok(vec![input.iter().product()]),
        LayerOp::Affine { weights, .. } => {
            if input.len() != 1 || input[0] != weights.shape()[1] {
                return Err(Error::shape(
                    "network",
                    format!(
                        "layer '{id}': affine expects input [{}], got {input:?}",
                        weights.shape()[1]
                    ),
                ));
            }
            Ok(vec![weights.shape()[0]])
        }
        LayerOp::Residual { branch2 } => {
            let mut shape = input.to_vec();
            for inner in branch2 {
                shape = op_output_shape(inner, &shape)?;
            }
            if shape != input {
                return Err(Error::shape(
                    "network",
                    format!("layer '{id}': branch2 output {shape:?} must match block input {input:?}"),
                ));
            }
            Ok(shape)
        }
    }
}

fn op_forward<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let ctx = |e: Error| e.in_context(&format!("layer '{}'", layer.id));
    match &layer.op {
        LayerOp::Conv { weights, bias, params } => {
            conv2d_forward(x, weights, bias, *params).map_err(ctx)
        }
        LayerOp::Relu => Ok(relu(x)),
        LayerOp::MaxPool { window, stride } => {
            Ok(maxpool(x, *window, *stride).map_err(ctx)?.output)
        }
        LayerOp::Flatten => x.reshape(vec![x.len()]).map_err(ctx),
        LayerOp::Affine { weights, bias } => affine_forward(x, weights, bias).map_err(ctx),
        LayerOp::Residual { branch2 } => {
            let mut y = x.clone();
            for inner in branch2 {
                y = op_forward(inner, &y)?;
            }
            let sum = x.add(&y).map_err(ctx)?;
            Ok(relu(&sum))
        }
    }
}

impl<T: Scalar> Network<T> {
    /// Build a freshly initialized network from a validated config.
    pub fn from_arch(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layers, out_shape) = build_layers(&cfg.layers, cfg.input.clone(), &mut rng)?;
        if out_shape != [cfg.class_count] {
            return Err(Error::config(format!(
                "architecture output {out_shape:?} does not match class_count {}",
                cfg.class_count
            )));
        }
        Ok(Network { input_shape: cfg.input.clone(), class_count: cfg.class_count, layers })
    }

    /// Recover the architecture config describing this network's current
    /// structure (filter counts reflect any surgery already applied).
    pub fn to_arch(&self) -> ArchConfig {
        fn spec_of<T: Scalar>(layer: &Layer<T>) -> LayerSpec {
            match &layer.op {
                LayerOp::Conv { weights, params, .. } => LayerSpec::conv(
                    &layer.id,
                    weights.shape()[0],
                    weights.shape()[2],
                    params.stride,
                    params.padding,
                ),
                LayerOp::Relu => LayerSpec::relu(&layer.id),
                LayerOp::MaxPool { window, stride } => {
                    LayerSpec::maxpool(&layer.id, *window, *stride)
                }
                LayerOp::Flatten => LayerSpec::flatten(&layer.id),
                LayerOp::Affine { weights, .. } => {
                    LayerSpec::affine(&layer.id, weights.shape()[0])
                }
                LayerOp::Residual { branch2 } => {
                    LayerSpec::residual(&layer.id, branch2.iter().map(spec_of).collect())
                }
            }
        }
        ArchConfig {
            schema: ARCH_SCHEMA.to_string(),
            input: self.input_shape.clone(),
            class_count: self.class_count,
            layers: self.layers.iter().map(spec_of).collect(),
        }
    }

    /// End-to-end structural check: unique ids, compatible shapes, and an
    /// output matching class_count.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        fn walk<'a, T>(layers: &'a [Layer<T>], seen: &mut std::collections::BTreeSet<&'a str>) -> Result<()> {
            for layer in layers {
                if !seen.insert(layer.id.as_str()) {
                    return Err(Error::config(format!("duplicate layer id '{}'", layer.id)));
                }
                if let LayerOp::Residual { branch2 } = &layer.op {
                    walk(branch2, seen)?;
                }
            }
            Ok(())
        }
        walk(&self.layers, &mut seen)?;
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = op_output_shape(layer, &shape)?;
        }
        if shape != [self.class_count] {
            return Err(Error::config(format!(
                "network output {shape:?} does not match class_count {}",
                self.class_count
            )));
        }
        Ok(())
    }

    /// Shapes after each top-level layer for the declared input.
    pub fn layer_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = op_output_shape(layer, &shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(
                "forward",
                format!("input shape {:?}, network expects {:?}", image.shape(), self.input_shape),
            ));
        }
        let mut cur = image.clone();
        for layer in &self.layers {
            cur = op_forward(layer, &cur)?;
        }
        Ok(cur)
    }

    /// Forward pass that records every named layer's output, residual
    /// branch layers included (emitted before their block's own entry).
    pub fn forward_trace(&self, image: &Tensor<T>) -> Result<Vec<(String, Tensor<T>)>> {
        fn walk<T: Scalar>(
            layers: &[Layer<T>],
            x: Tensor<T>,
            out: &mut Vec<(String, Tensor<T>)>,
        ) -> Result<Tensor<T>> {
            let mut cur = x;
            for layer in layers {
                match &layer.op {
                    LayerOp::Residual { branch2 } => {
                        let branch_out = walk(branch2, cur.clone(), out)?;
                        let sum = cur
                            .add(&branch_out)
                            .map_err(|e| e.in_context(&format!("layer '{}'", layer.id)))?;
                        cur = relu(&sum);
                    }
                    _ => cur = op_forward(layer, &cur)?,
                }
                out.push((layer.id.clone(), cur.clone()));
            }
            Ok(cur)
        }
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(
                "forward_trace",
                format!("input shape {:?}, network expects {:?}", image.shape(), self.input_shape),
            ));
        }
        let mut out = Vec::new();
        walk(&self.layers, image.clone(), &mut out)?;
        Ok(out)
    }

    /// Index of a top-level layer by id.
    pub fn layer_index(&self, id: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.id == id)
            .ok_or_else(|| Error::LayerNotFound(id.to_string()))
    }

    /// (id, filter count) for every conv layer, residual branches included.
    pub fn conv_filter_counts(&self) -> Vec<(String, usize)> {
        fn walk<T: Scalar>(layers: &[Layer<T>], out: &mut Vec<(String, usize)>) {
            for layer in layers {
                match &layer.op {
                    LayerOp::Conv { bias, .. } => out.push((layer.id.clone(), bias.len())),
                    LayerOp::Residual { branch2 } => walk(branch2, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    /// Total parameter count (weights + biases).
    pub fn param_count(&self) -> usize {
        fn walk<T: Scalar>(layers: &[Layer<T>]) -> usize {
            layers
                .iter()
                .map(|l| match &l.op {
                    LayerOp::Conv { weights, bias, .. } => weights.len() + bias.len(),
                    LayerOp::Affine { weights, bias } => weights.len() + bias.len(),
                    LayerOp::Residual { branch2 } => walk(branch2),
                    _ => 0,
                })
                .sum()
        }
        walk(&self.layers)
    }
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_class<T: Scalar>(logits: &Tensor<T>) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.data().iter().enumerate().skip(1) {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best
}

pub fn predict<T: Scalar>(net: &Network<T>, image: &Tensor<T>) -> Result<usize> {
    Ok(argmax_class(&net.forward(image)?))
}

/// Predicted class per example, in dataset order. Parallel over examples;
/// the output is schedule-independent because positions are preserved.
pub fn predictions<T: Scalar>(net: &Network<T>, data: &crate::dataset::Dataset<T>) -> Result<Vec<usize>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| predict(net, data.image(i)))
        .collect()
}

pub fn evaluate_accuracy<T: Scalar>(net: &Network<T>, data: &crate::dataset::Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset { op: "evaluate_accuracy" });
    }
    let preds = predictions(net, data)?;
    let correct: u64 =
        preds.iter().zip(data.labels()).map(|(&p, &l)| u64::from(p == l)).sum();
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerClassAccuracy {
    /// class → (correct, total) for classes present in the data.
    pub tallies: BTreeMap<usize, (u64, u64)>,
    /// classes in [0, class_count) with no examples.
    pub absent: Vec<usize>,
}

impl PerClassAccuracy {
    pub fn accuracy_of(&self, class: usize) -> Option<f64> {
        self.tallies.get(&class).map(|&(c, n)| c as f64 / n as f64)
    }

    /// Frequency-weighted mean of per-class accuracies; equals the overall
    /// accuracy up to rounding.
    pub fn weighted_mean(&self) -> f64 {
        let total: u64 = self.tallies.values().map(|&(_, n)| n).sum();
        self.tallies
            .values()
            .map(|&(c, n)| (c as f64 / n as f64) * (n as f64 / total as f64))
            .sum()
    }
}

pub fn per_class_accuracy<T: Scalar>(
    net: &Network<T>,
    data: &crate::dataset::Dataset<T>,
) -> Result<PerClassAccuracy> {
    if data.is_empty() {
        return Err(Error::EmptyDataset { op: "per_class_accuracy" });
    }
    let preds = predictions(net, data)?;
    let mut tallies: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for (&p, &l) in preds.iter().zip(data.labels()) {
        let entry = tallies.entry(l).or_insert((0, 0));
        entry.1 += 1;
        entry.0 += u64::from(p == l);
    }
    let absent = (0..data.class_count).filter(|c| !tallies.contains_key(c)).collect();
    Ok(PerClassAccuracy { tallies, absent })
}
