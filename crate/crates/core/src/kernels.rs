//! Numerical kernels: 2-d convolution (forward and backward), ReLU, max
//! pooling, affine maps and softmax cross-entropy.
//!
//! Conventions:
//! - activations are `[channels, height, width]`, filters are
//!   `[out_channels, in_channels, k, k]`, all row-major;
//! - "convolution" is correlation (no kernel flip), the usual CNN convention;
//! - every reduction accumulates in `f64` and narrows once at the end, so
//!   results are deterministic and stable enough to compare accuracies on.
//!
//! All functions here are pure: inputs are never mutated, and calls are safe
//! to run concurrently on shared read-only tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride and symmetric zero-padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv_params", "stride must be positive"));
        }
        Ok(ConvParams { stride, padding })
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams { stride: 1, padding: 0 }
    }
}

/// Output extent of a windowed op along one spatial axis:
/// `floor((in + 2*padding - window) / stride) + 1`, which must be >= 1.
pub fn out_extent(input: usize, window: usize, stride: usize, padding: usize, axis: &str) -> Result<usize> {
    let padded = input + 2 * padding;
    if window == 0 {
        return Err(Error::invalid("out_extent", "window must be positive"));
    }
    if window > padded {
        return Err(Error::shape(
            "out_extent",
            format!("window {window} exceeds padded input extent {padded} on axis {axis}"),
        ));
    }
    Ok((padded - window) / stride + 1)
}

fn check_chw<T: Scalar>(t: &Tensor<T>, op: &'static str, role: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::shape(op, format!("{role} must be [C,H,W], got {other:?}"))),
    }
}

/// Copies `[C,H,W]` data into a zero-padded `[C, H+2p, W+2p]` buffer.
fn pad_input<T: Scalar>(data: &[T], c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); c * ph * pw];
    for d in 0..c {
        for y in 0..h {
            let src = &data[d * h * w + y * w..][..w];
            let dst = &mut out[d * ph * pw + (y + p) * pw + p..][..w];
            dst.copy_from_slice(src);
        }
    }
    out
}

/// Correlates each output-channel filter against the input block:
/// `out[c,y,x] = bias[c] + sum_{d,u,v} weights[c,d,u,v] * padded[d, y*s+u, x*s+v]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    params: ConvParams,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_forward";
    let (c_in, h, w) = check_chw(input, OP, "input")?;
    let (c_out, wc_in, kh, kw) = match weights.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        other => return Err(Error::shape(OP, format!("weights must be [C_out,C_in,k,k], got {other:?}"))),
    };
    if kh != kw {
        return Err(Error::shape(OP, format!("kernel must be square, got {kh}x{kw}")));
    }
    if wc_in != c_in {
        return Err(Error::shape(
            OP,
            format!("input has {c_in} channels (axis 0) but weights expect {wc_in} (axis 1)"),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(
            OP,
            format!("bias shape {:?} does not match {c_out} output channels", bias.shape()),
        ));
    }
    let k = kh;
    let s = params.stride;
    let p = params.padding;
    let oh = out_extent(h, k, s, p, "height")?;
    let ow = out_extent(w, k, s, p, "width")?;

    let padded_store;
    let (pdata, ph, pw) = if p == 0 {
        (input.data(), h, w)
    } else {
        padded_store = pad_input(input.data(), c_in, h, w, p);
        (padded_store.as_slice(), h + 2 * p, w + 2 * p)
    };
    let _ = ph;

    let wdata = weights.data();
    let mut out = Vec::with_capacity(c_out * oh * ow);
    let mut acc = vec![0f64; oh * ow];
    for c in 0..c_out {
        let b = bias.data()[c].to_acc();
        acc.iter_mut().for_each(|a| *a = b);
        for d in 0..c_in {
            let plane = &pdata[d * ph * pw..][..ph * pw];
            for u in 0..k {
                let wrow = &wdata[((c * c_in + d) * k + u) * k..][..k];
                for y in 0..oh {
                    let in_row = &plane[(y * s + u) * pw..][..pw];
                    let acc_row = &mut acc[y * ow..][..ow];
                    for (v, &wv) in wrow.iter().enumerate() {
                        let wv = wv.to_acc();
                        if s == 1 {
                            for (a, iv) in acc_row.iter_mut().zip(&in_row[v..v + ow]) {
                                *a += wv * iv.to_acc();
                            }
                        } else {
                            for (x, a) in acc_row.iter_mut().enumerate() {
                                *a += wv * in_row[x * s + v].to_acc();
                            }
                        }
                    }
                }
            }
        }
        out.extend(acc.iter().map(|&a| T::from_acc(a)));
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    params: ConvParams,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    const OP: &str = "conv2d_backward";
    let (c_in, h, w) = check_chw(input, OP, "input")?;
    let (c_out, _, k, _) = match weights.shape() {
        [a, b, c, d] if *b == c_in && *c == *d => (*a, *b, *c, *d),
        other => {
            return Err(Error::shape(
                OP,
                format!("weights {other:?} incompatible with input of {c_in} channels"),
            ))
        }
    };
    let s = params.stride;
    let p = params.padding;
    let oh = out_extent(h, k, s, p, "height")?;
    let ow = out_extent(w, k, s, p, "width")?;
    if upstream.shape() != [c_out, oh, ow] {
        return Err(Error::shape(
            OP,
            format!("upstream shape {:?}, expected [{c_out}, {oh}, {ow}]", upstream.shape()),
        ));
    }

    let padded_store;
    let (pdata, pw) = if p == 0 {
        (input.data(), w)
    } else {
        padded_store = pad_input(input.data(), c_in, h, w, p);
        (padded_store.as_slice(), w + 2 * p)
    };
    let ph = h + 2 * p;
    let up = upstream.data();
    let wdata = weights.data();

    // Bias: sum of upstream over the spatial positions of each channel.
    let grad_bias: Vec<T> = (0..c_out)
        .map(|c| T::from_acc(up[c * oh * ow..][..oh * ow].iter().map(|&g| g.to_acc()).sum()))
        .collect();

    // Weights: correlate upstream with the padded input.
    let mut grad_w = vec![0f64; weights.len()];
    for c in 0..c_out {
        for d in 0..c_in {
            let plane = &pdata[d * ph * pw..][..ph * pw];
            for u in 0..k {
                for v in 0..k {
                    let mut acc = 0f64;
                    for y in 0..oh {
                        let up_row = &up[(c * oh + y) * ow..][..ow];
                        let in_row = &plane[(y * s + u) * pw..];
                        for (x, &g) in up_row.iter().enumerate() {
                            acc += g.to_acc() * in_row[x * s + v].to_acc();
                        }
                    }
                    grad_w[((c * c_in + d) * k + u) * k + v] = acc;
                }
            }
        }
    }

    // Input: scatter upstream through the kernel into a padded buffer, then crop.
    let mut grad_pad = vec![0f64; c_in * ph * pw];
    for c in 0..c_out {
        for d in 0..c_in {
            let plane = &mut grad_pad[d * ph * pw..][..ph * pw];
            for u in 0..k {
                let wrow = &wdata[((c * c_in + d) * k + u) * k..][..k];
                for y in 0..oh {
                    let up_row = &up[(c * oh + y) * ow..][..ow];
                    let out_row = &mut plane[(y * s + u) * pw..][..pw];
                    for (v, &wv) in wrow.iter().enumerate() {
                        let wv = wv.to_acc();
                        for (x, &g) in up_row.iter().enumerate() {
                            out_row[x * s + v] += g.to_acc() * wv;
                        }
                    }
                }
            }
        }
    }
    let mut grad_in = Vec::with_capacity(c_in * h * w);
    for d in 0..c_in {
        for y in 0..h {
            let row = &grad_pad[d * ph * pw + (y + p) * pw + p..][..w];
            grad_in.extend(row.iter().map(|&a| T::from_acc(a)));
        }
    }

    Ok((
        Tensor::new(vec![c_in, h, w], grad_in)?,
        Tensor::new(weights.shape().to_vec(), grad_w.into_iter().map(T::from_acc).collect())?,
        Tensor::new(vec![c_out], grad_bias)?,
    ))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Routes upstream gradient through positions where the forward input was positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != upstream.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("input {:?} vs upstream {:?}", input.shape(), upstream.shape()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Max pooling output plus the flat input index of each cell's maximum,
/// which the backward pass routes gradients through. Ties go to the
/// first position in row-major scan order.
#[derive(Debug, Clone)]
pub struct MaxPoolOut<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn maxpool<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<MaxPoolOut<T>> {
    const OP: &str = "maxpool";
    let (c, h, w) = check_chw(x, OP, "input")?;
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be positive"));
    }
    let oh = out_extent(h, window, stride, 0, "height")?;
    let ow = out_extent(w, window, stride, 0, "width")?;
    let data = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for d in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_at = 0usize;
                for u in 0..window {
                    let row = d * h * w + (y * stride + u) * w + xo * stride;
                    for v in 0..window {
                        let val = data[row + v];
                        if val > best {
                            best = val;
                            best_at = row + v;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_at);
            }
        }
    }
    Ok(MaxPoolOut { output: Tensor::new(vec![c, oh, ow], out)?, argmax })
}

pub fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != upstream.len() {
        return Err(Error::shape(
            "maxpool_backward",
            format!("{} argmax entries vs {} upstream values", argmax.len(), upstream.len()),
        ));
    }
    let mut grad = Tensor::zeros(input_shape.to_vec());
    let gdata = grad.data_mut();
    for (&at, &g) in argmax.iter().zip(upstream.data()) {
        gdata[at] = gdata[at] + g;
    }
    Ok(grad)
}

/// `y[o] = b[o] + sum_i W[o,i] * x[i]` for a flat input vector.
pub fn affine_forward<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "affine_forward";
    let n_in = match x.shape() {
        [n] => *n,
        other => return Err(Error::shape(OP, format!("input must be flat, got {other:?}"))),
    };
    let (n_out, wn_in) = match weights.shape() {
        [o, i] => (*o, *i),
        other => return Err(Error::shape(OP, format!("weights must be [out,in], got {other:?}"))),
    };
    if wn_in != n_in {
        return Err(Error::shape(OP, format!("input length {n_in} but weights expect {wn_in} (axis 1)")));
    }
    if bias.shape() != [n_out] {
        return Err(Error::shape(OP, format!("bias shape {:?}, expected [{n_out}]", bias.shape())));
    }
    let xd = x.data();
    let wd = weights.data();
    let out: Vec<T> = (0..n_out)
        .map(|o| {
            let row = &wd[o * n_in..][..n_in];
            let mut acc = bias.data()[o].to_acc();
            for (&wv, &xv) in row.iter().zip(xd) {
                acc += wv.to_acc() * xv.to_acc();
            }
            T::from_acc(acc)
        })
        .collect();
    Tensor::new(vec![n_out], out)
}

pub fn affine_backward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    const OP: &str = "affine_backward";
    let (n_out, n_in) = match weights.shape() {
        [o, i] => (*o, *i),
        other => return Err(Error::shape(OP, format!("weights must be [out,in], got {other:?}"))),
    };
    if x.shape() != [n_in] || upstream.shape() != [n_out] {
        return Err(Error::shape(
            OP,
            format!(
                "x {:?} / upstream {:?} incompatible with weights [{n_out}, {n_in}]",
                x.shape(),
                upstream.shape()
            ),
        ));
    }
    let xd = x.data();
    let wd = weights.data();
    let up = upstream.data();
    let mut grad_w = Vec::with_capacity(n_out * n_in);
    for o in 0..n_out {
        let g = up[o].to_acc();
        grad_w.extend(xd.iter().map(|&xv| T::from_acc(g * xv.to_acc())));
    }
    let grad_x: Vec<T> = (0..n_in)
        .map(|i| {
            let mut acc = 0f64;
            for o in 0..n_out {
                acc += up[o].to_acc() * wd[o * n_in + i].to_acc();
            }
            T::from_acc(acc)
        })
        .collect();
    Ok((
        Tensor::new(vec![n_in], grad_x)?,
        Tensor::new(vec![n_out, n_in], grad_w)?,
        Tensor::new(vec![n_out], up.to_vec())?,
    ))
}

/// Numerically stable softmax over a flat logit vector.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 1 {
        return Err(Error::shape("softmax", format!("logits must be flat, got {:?}", logits.shape())));
    }
    let max = logits.data().iter().map(|&v| v.to_acc()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v.to_acc() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::new(logits.shape().to_vec(), exps.into_iter().map(|e| T::from_acc(e / total)).collect())
}

/// Cross-entropy loss of softmax(logits) against a class label, plus the
/// gradient with respect to the logits (`softmax - onehot`).
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<(f64, Tensor<T>)> {
    let classes = logits.len();
    if label >= classes {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("label {label} out of range for {classes} classes"),
        ));
    }
    let probs = softmax(logits)?;
    // Stable log-sum-exp in f64; going through the narrowed probability
    // would cost ~1e-8 of loss precision per sample.
    let max = logits.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_acc()));
    let lse: f64 = logits.data().iter().map(|&v| (v.to_acc() - max).exp()).sum();
    let loss = lse.ln() + max - logits.data()[label].to_acc();
    let mut grad = probs;
    let g = grad.data_mut();
    g[label] = g[label] - T::one();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<T: Scalar>(shape: &[usize], data: &[T]) -> Tensor<T> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_scales_input() {
        // 1x1 kernel with weight 2 doubles a 1x3x3 input of ones.
        let input = Tensor::<f32>::filled([1, 3, 3], 1.0);
        let weights = t(&[1, 1, 1, 1], &[2.0f32]);
        let bias = t(&[1], &[0.0f32]);
        let out = conv2d_forward(&input, &weights, &bias, ConvParams::default()).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_hand_computed_dot_product() {
        let input = t(&[1, 2, 2], &[1.0f32, 2.0, 3.0, 4.0]);
        let weights = t(&[1, 1, 2, 2], &[1.0f32, 0.0, 0.0, 1.0]);
        let bias = t(&[1], &[0.0f32]);
        let out = conv2d_forward(&input, &weights, &bias, ConvParams::default()).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_axis() {
        let input = Tensor::<f32>::zeros([2, 4, 4]);
        let weights = Tensor::<f32>::zeros([1, 3, 2, 2]);
        let bias = Tensor::<f32>::zeros([1]);
        let err = conv2d_forward(&input, &weights, &bias, ConvParams::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channels") && msg.contains("axis"), "got: {msg}");
    }

    #[test]
    fn conv_rejects_window_exceeding_input() {
        let input = Tensor::<f32>::zeros([1, 2, 2]);
        let weights = Tensor::<f32>::zeros([1, 1, 3, 3]);
        let bias = Tensor::<f32>::zeros([1]);
        assert!(conv2d_forward(&input, &weights, &bias, ConvParams::default()).is_err());
    }

    #[test]
    fn conv_backward_zero_upstream_gives_zero_grads() {
        let input = Tensor::<f32>::filled([2, 4, 4], 0.7);
        let weights = Tensor::<f32>::filled([3, 2, 3, 3], 0.3);
        let params = ConvParams { stride: 1, padding: 1 };
        let up = Tensor::<f32>::zeros([3, 4, 4]);
        let (gi, gw, gb) = conv2d_backward(&input, &weights, params, &up).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_single_pixel_chain_rule() {
        // 1x1 kernel on a single pixel: grad_weights = upstream * input value.
        let input = t(&[1, 1, 1], &[3.0f32]);
        let weights = t(&[1, 1, 1, 1], &[0.5f32]);
        let up = t(&[1, 1, 1], &[2.0f32]);
        let (gi, gw, gb) = conv2d_backward(&input, &weights, ConvParams::default(), &up).unwrap();
        assert_eq!(gw.data(), &[6.0]);
        assert_eq!(gi.data(), &[1.0]); // upstream * weight
        assert_eq!(gb.data(), &[2.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = t(&[3], &[-1.0f32, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let logits = Tensor::<f32>::filled([10], 1.3);
        let p = softmax(&logits).unwrap();
        for &v in p.data() {
            assert!((v - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_two_by_two() {
        let x = t(&[1, 2, 2], &[1.0f32, 2.0, 3.0, 4.0]);
        let pooled = maxpool(&x, 2, 2).unwrap();
        assert_eq!(pooled.output.shape(), &[1, 1, 1]);
        assert_eq!(pooled.output.data(), &[4.0]);
        assert_eq!(pooled.argmax, vec![3]);
    }

    #[test]
    fn maxpool_window_larger_than_input_errors() {
        let x = Tensor::<f32>::zeros([1, 2, 2]);
        assert!(maxpool(&x, 3, 1).is_err());
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = t(&[1, 2, 2], &[1.0f32, 2.0, 3.0, 4.0]);
        let pooled = maxpool(&x, 2, 2).unwrap();
        let up = t(&[1, 1, 1], &[5.0f32]);
        let grad = maxpool_backward(x.shape(), &pooled.argmax, &up).unwrap();
        assert_eq!(grad.data(), &[0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn affine_matches_hand_computation() {
        let x = t(&[2], &[1.0f32, 2.0]);
        let w = t(&[2, 2], &[1.0f32, 0.0, 3.0, -1.0]);
        let b = t(&[2], &[0.5f32, 0.0]);
        let y = affine_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.5, 1.0]);
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let logits = t(&[3], &[0.0f32, 0.0, 0.0]);
        let (loss, grad) = softmax_cross_entropy(&logits, 1).unwrap();
        assert!((loss - (3.0f64).ln()).abs() < 1e-9);
        let third = 1.0 / 3.0;
        assert!((grad.data()[0] - third).abs() < 1e-6);
        assert!((grad.data()[1] - (third - 1.0)).abs() < 1e-6);
        assert!((grad.data()[2] - third).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Tensor::<f32>::zeros([3]);
        assert!(softmax_cross_entropy(&logits, 3).is_err());
    }
}
