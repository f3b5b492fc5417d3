//! Forward operations over [`Tensor`]: 2-D convolution, batch normalization,
//! activations, pooling, and the dense affine map.
//!
//! All functions are pure. Train-mode batch normalization is the one
//! exception: it updates the running statistics in its parameter record,
//! deterministically.

use crate::scalar::Scalar;

use super::{Tensor, TensorError};

/// Convolution parameters: weights `(outC, inC, kH, kW)`, bias `outC`,
/// symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<S> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> ConvParams<S> {
    pub fn new(
        weights: Tensor<S>,
        bias: Tensor<S>,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        if weights.rank() != 4 {
            return Err(TensorError::RankMismatch {
                op: "conv2d",
                expected: 4,
                shape: weights.shape().to_vec(),
            });
        }
        let out_c = weights.shape()[0];
        if bias.rank() != 1 || bias.shape()[0] != out_c {
            return Err(TensorError::BadParams {
                op: "conv2d",
                reason: format!(
                    "bias length {:?} must equal output channels {out_c}",
                    bias.shape()
                ),
            });
        }
        if stride == 0 {
            return Err(TensorError::BadParams {
                op: "conv2d",
                reason: "stride must be >= 1".into(),
            });
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }
}

/// Per-channel batch normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub epsilon: S,
    pub momentum: S,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

impl<S: Scalar> BatchNormParams<S> {
    /// Pass-through initialization: gamma 1, beta 0, running stats (0, 1).
    pub fn passthrough(channels: usize, epsilon: S, momentum: S) -> Result<Self, TensorError> {
        let params = Self {
            gamma: Tensor::full(&[channels], S::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], S::one())?,
            epsilon,
            momentum,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let c = self.gamma.shape()[0];
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.rank() != 1 || t.shape()[0] != c {
                return Err(TensorError::BadParams {
                    op: "batch_norm",
                    reason: format!("{name} length {:?} must equal channels {c}", t.shape()),
                });
            }
        }
        if self.running_var.data().iter().any(|&v| v < S::zero()) {
            return Err(TensorError::BadParams {
                op: "batch_norm",
                reason: "running_var elements must be >= 0".into(),
            });
        }
        if self.epsilon <= S::zero() {
            return Err(TensorError::BadParams {
                op: "batch_norm",
                reason: "epsilon must be > 0".into(),
            });
        }
        if self.momentum <= S::zero() || self.momentum >= S::one() {
            return Err(TensorError::BadParams {
                op: "batch_norm",
                reason: "momentum must lie in (0, 1)".into(),
            });
        }
        Ok(())
    }
}

pub(crate) fn conv2d_output_shape(
    input: &[usize],
    kernel: (usize, usize),
    out_c: usize,
    stride: usize,
    padding: usize,
) -> Result<Vec<usize>, TensorError> {
    let (n, h, w) = (input[0], input[2], input[3]);
    let (kh, kw) = kernel;
    let h_num = h + 2 * padding;
    let w_num = w + 2 * padding;
    if h_num < kh || w_num < kw {
        return Err(TensorError::EmptyOutput {
            op: "conv2d",
            input: input.to_vec(),
            kernel: kh,
            kernel_w: kw,
            stride,
            padding,
        });
    }
    let oh = (h_num - kh) / stride + 1;
    let ow = (w_num - kw) / stride + 1;
    Ok(vec![n, out_c, oh, ow])
}

/// 2-D convolution over an NCHW tensor with symmetric zero padding.
pub fn conv2d<S: Scalar>(input: &Tensor<S>, params: &ConvParams<S>) -> Result<Tensor<S>, TensorError> {
    if input.rank() != 4 {
        return Err(TensorError::RankMismatch {
            op: "conv2d",
            expected: 4,
            shape: input.shape().to_vec(),
        });
    }
    let in_c = input.shape()[1];
    if in_c != params.in_channels() {
        return Err(TensorError::ChannelMismatch {
            op: "conv2d",
            expected: params.in_channels(),
            got: in_c,
        });
    }
    let (kh, kw) = params.kernel();
    let out_shape = conv2d_output_shape(
        input.shape(),
        (kh, kw),
        params.out_channels(),
        params.stride,
        params.padding,
    )?;
    let (n, h, w) = (input.shape()[0], input.shape()[2], input.shape()[3]);
    let (out_c, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let stride = params.stride;
    let pad = params.padding as isize;

    let mut out = vec![S::zero(); n * out_c * oh * ow];
    let x = input.data();
    let wt = params.weights.data();
    let bias = params.bias.data();

    for b in 0..n {
        for oc in 0..out_c {
            let out_plane = &mut out[(b * out_c + oc) * oh * ow..(b * out_c + oc + 1) * oh * ow];
            out_plane.fill(bias[oc]);
            for ic in 0..in_c {
                let in_plane = &x[(b * in_c + ic) * h * w..(b * in_c + ic + 1) * h * w];
                for r in 0..kh {
                    for c in 0..kw {
                        let wv = wt[((oc * in_c + ic) * kh + r) * kw + c];
                        if wv == S::zero() {
                            continue;
                        }
                        let col_off = c as isize - pad;
                        let (lo, hi) = col_bounds(col_off, stride, w, ow);
                        if lo >= hi {
                            continue;
                        }
                        for orow in 0..oh {
                            let irow = (orow * stride + r) as isize - pad;
                            if irow < 0 || irow >= h as isize {
                                continue;
                            }
                            let in_row = &in_plane[irow as usize * w..(irow as usize + 1) * w];
                            let out_row = &mut out_plane[orow * ow..(orow + 1) * ow];
                            let in_base = (lo * stride) as isize + col_off;
                            if stride == 1 {
                                let in_seg = &in_row[in_base as usize..in_base as usize + (hi - lo)];
                                let out_seg = &mut out_row[lo..hi];
                                for (slot, &v) in out_seg.iter_mut().zip(in_seg.iter()) {
                                    *slot += wv * v;
                                }
                            } else {
                                let mut icol = in_base as usize;
                                for slot in &mut out_row[lo..hi] {
                                    *slot += wv * in_row[icol];
                                    icol += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&out_shape, out)
}

/// Output-column range `[lo, hi)` for which `ocol * stride + offset` lands in
/// `[0, input_width)`.
pub(crate) fn col_bounds(offset: isize, stride: usize, input_width: usize, out_width: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let max_icol = input_width as isize - 1 - offset;
    if max_icol < 0 {
        return (out_width, out_width);
    }
    let hi = (max_icol as usize / stride + 1).min(out_width);
    (lo.min(out_width), hi)
}

pub(crate) struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

pub(crate) fn channel_stats<S: Scalar>(input: &Tensor<S>) -> BatchStats<S> {
    let (slab, channels) = channel_layout(input.shape());
    let per_channel = input.numel() / channels;
    let mut mean = vec![S::zero(); channels];
    let mut var = vec![S::zero(); channels];
    let x = input.data();
    for c in 0..channels {
        let mut sum = S::zero();
        for_channel(x, c, channels, slab, |v| sum += v);
        let m = sum / S::from_f64_lossy(per_channel as f64);
        let mut sq = S::zero();
        for_channel(x, c, channels, slab, |v| {
            let d = v - m;
            sq += d * d;
        });
        mean[c] = m;
        var[c] = sq / S::from_f64_lossy(per_channel as f64);
    }
    BatchStats { mean, var }
}

/// (spatial slab size, channel count) for NC or NCHW layouts.
pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (1, shape[1]),
        4 => (shape[2] * shape[3], shape[1]),
        _ => (1, shape[shape.len() - 1]),
    }
}

fn for_channel<S: Scalar>(data: &[S], c: usize, channels: usize, slab: usize, mut f: impl FnMut(S)) {
    let row = channels * slab;
    let n = data.len() / row;
    for b in 0..n {
        let base = b * row + c * slab;
        for v in &data[base..base + slab] {
            f(*v);
        }
    }
}

pub(crate) fn apply_channel_affine<S: Scalar>(
    input: &Tensor<S>,
    mean: &[S],
    var: &[S],
    gamma: &[S],
    beta: &[S],
    epsilon: S,
) -> Tensor<S> {
    let (slab, channels) = channel_layout(input.shape());
    let row = channels * slab;
    let n = input.numel() / row;
    let mut out = Vec::with_capacity(input.numel());
    let x = input.data();
    for b in 0..n {
        for c in 0..channels {
            let inv_std = S::one() / (var[c] + epsilon).sqrt();
            let base = b * row + c * slab;
            for &v in &x[base..base + slab] {
                out.push(gamma[c] * (v - mean[c]) * inv_std + beta[c]);
            }
        }
    }
    Tensor::new(input.shape(), out).expect("shape preserved")
}

/// Batch normalization over the channel axis of an `N x C` or `N x C x H x W`
/// tensor. Train mode normalizes by batch statistics and folds them into the
/// running estimates; infer mode reads the running estimates.
pub fn batch_norm<S: Scalar>(
    input: &Tensor<S>,
    params: &mut BatchNormParams<S>,
    mode: BatchNormMode,
) -> Result<Tensor<S>, TensorError> {
    if input.rank() != 2 && input.rank() != 4 {
        return Err(TensorError::RankMismatch {
            op: "batch_norm",
            expected: 4,
            shape: input.shape().to_vec(),
        });
    }
    let (_, channels) = channel_layout(input.shape());
    if channels != params.channels() {
        return Err(TensorError::ChannelMismatch {
            op: "batch_norm",
            expected: params.channels(),
            got: channels,
        });
    }
    if input.shape()[0] == 0 {
        return Err(TensorError::EmptyBatch { op: "batch_norm" });
    }
    match mode {
        BatchNormMode::Train => {
            let stats = channel_stats(input);
            let out = apply_channel_affine(
                input,
                &stats.mean,
                &stats.var,
                params.gamma.data(),
                params.beta.data(),
                params.epsilon,
            );
            let momentum = params.momentum;
            let keep = S::one() - momentum;
            for c in 0..channels {
                let rm = params.running_mean.data_mut();
                rm[c] = keep * rm[c] + momentum * stats.mean[c];
                let rv = params.running_var.data_mut();
                rv[c] = keep * rv[c] + momentum * stats.var[c];
            }
            Ok(out)
        }
        BatchNormMode::Infer => batch_norm_frozen(input, params),
    }
}

/// Infer-mode batch normalization against frozen running statistics; never
/// mutates the parameter record, so it is safe for concurrent callers.
pub fn batch_norm_frozen<S: Scalar>(
    input: &Tensor<S>,
    params: &BatchNormParams<S>,
) -> Result<Tensor<S>, TensorError> {
    if input.rank() != 2 && input.rank() != 4 {
        return Err(TensorError::RankMismatch {
            op: "batch_norm",
            expected: 4,
            shape: input.shape().to_vec(),
        });
    }
    let (_, channels) = channel_layout(input.shape());
    if channels != params.channels() {
        return Err(TensorError::ChannelMismatch {
            op: "batch_norm",
            expected: params.channels(),
            got: channels,
        });
    }
    Ok(apply_channel_affine(
        input,
        params.running_mean.data(),
        params.running_var.data(),
        params.gamma.data(),
        params.beta.data(),
        params.epsilon,
    ))
}

/// Elementwise `max(0, x)`.
pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Elementwise logistic function, numerically stable for large `|x|` and
/// clamped to the nearest representable values strictly inside (0, 1).
pub fn sigmoid<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    let raw = if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    };
    raw.max(S::min_positive_value())
        .min(S::one() - S::epsilon())
}

/// Elementwise hyperbolic tangent.
pub fn tanh<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| v.tanh())
}

/// Mean over each channel's spatial plane: NCHW -> N x C. Handles non-square
/// feature maps.
pub fn global_avg_pool<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    if input.rank() != 4 {
        return Err(TensorError::RankMismatch {
            op: "global_avg_pool",
            expected: 4,
            shape: input.shape().to_vec(),
        });
    }
    let [n, c, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let plane = h * w;
    let inv = S::one() / S::from_f64_lossy(plane as f64);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n * c {
        let mut sum = S::zero();
        for &v in &x[i * plane..(i + 1) * plane] {
            sum += v;
        }
        out.push(sum * inv);
    }
    Tensor::new(&[n, c], out)
}

/// Matrix product plus broadcast bias: `(N x D) . (D x K) + bias(K)`.
pub fn affine<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    if input.rank() != 2 || weights.rank() != 2 {
        return Err(TensorError::RankMismatch {
            op: "affine",
            expected: 2,
            shape: if input.rank() != 2 {
                input.shape().to_vec()
            } else {
                weights.shape().to_vec()
            },
        });
    }
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let (wd, k) = (weights.shape()[0], weights.shape()[1]);
    if d != wd || bias.rank() != 1 || bias.shape()[0] != k {
        return Err(TensorError::DimensionMismatch {
            op: "affine",
            lhs: input.shape().to_vec(),
            rhs: weights.shape().to_vec(),
        });
    }
    let x = input.data();
    let w = weights.data();
    let b = bias.data();
    let mut out = vec![S::zero(); n * k];
    for row in 0..n {
        let x_row = &x[row * d..(row + 1) * d];
        let out_row = &mut out[row * k..(row + 1) * k];
        out_row.copy_from_slice(b);
        for (i, &xv) in x_row.iter().enumerate() {
            if xv == S::zero() {
                continue;
            }
            let w_row = &w[i * k..(i + 1) * k];
            for (o, &wv) in out_row.iter_mut().zip(w_row.iter()) {
                *o += xv * wv;
            }
        }
    }
    Tensor::new(&[n, k], out)
}

/// Elementwise sum of two same-shape tensors.
pub fn add<S: Scalar>(lhs: &Tensor<S>, rhs: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    if lhs.shape() != rhs.shape() {
        return Err(TensorError::DimensionMismatch {
            op: "add",
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        });
    }
    let data = lhs
        .data()
        .iter()
        .zip(rhs.data().iter())
        .map(|(&a, &b)| a + b)
        .collect();
    Tensor::new(lhs.shape(), data)
}

/// Normalize each row of an `N x D` tensor to unit L2 norm.
pub fn l2_normalize_rows<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    if input.rank() != 2 {
        return Err(TensorError::RankMismatch {
            op: "l2_normalize_rows",
            expected: 2,
            shape: input.shape().to_vec(),
        });
    }
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let x = input.data();
    let mut out = Vec::with_capacity(n * d);
    for row in 0..n {
        let r = &x[row * d..(row + 1) * d];
        let norm = r.iter().map(|&v| v * v).sum::<S>().sqrt();
        if norm <= S::zero() {
            return Err(TensorError::BadParams {
                op: "l2_normalize_rows",
                reason: format!("row {row} has zero norm"),
            });
        }
        out.extend(r.iter().map(|&v| v / norm));
    }
    Tensor::new(input.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, data).unwrap()
    }

    fn conv(weights: Tensor<f64>, bias: Vec<f64>, stride: usize, padding: usize) -> ConvParams<f64> {
        ConvParams::new(weights, Tensor::vector(bias), stride, padding).unwrap()
    }

    #[test]
    fn conv2d_pointwise_scaling() {
        let input = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let params = conv(tensor(&[1, 1, 1, 1], &[2.0]), vec![0.0], 1, 0);
        let out = conv2d(&input, &params).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let input = tensor(&[1, 1, 2, 3], &[1.0, -2.0, 3.0, 4.0, 0.5, -0.25]);
        let params = conv(tensor(&[1, 1, 1, 1], &[1.0]), vec![0.0], 1, 0);
        let out = conv2d(&input, &params).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let input = Tensor::<f64>::zeros(&[1, 2, 4, 4]).unwrap();
        let params = conv(Tensor::zeros(&[3, 1, 3, 3]).unwrap(), vec![0.0; 3], 1, 1);
        let err = conv2d(&input, &params).unwrap_err();
        assert_eq!(
            err,
            TensorError::ChannelMismatch {
                op: "conv2d",
                expected: 1,
                got: 2
            }
        );
    }

    #[test]
    fn conv2d_rejects_empty_output() {
        let input = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        let params = conv(Tensor::zeros(&[1, 1, 5, 5]).unwrap(), vec![0.0], 1, 0);
        assert!(matches!(
            conv2d(&input, &params),
            Err(TensorError::EmptyOutput { .. })
        ));
    }

    #[test]
    fn batch_norm_affine_in_infer_mode() {
        let input = tensor(&[2, 2], &[1.0, -1.0, 0.5, 2.0]);
        let mut params = BatchNormParams::passthrough(2, 1e-12, 0.1).unwrap();
        params.gamma = Tensor::full(&[2], 2.0).unwrap();
        params.beta = Tensor::full(&[2], 3.0).unwrap();
        let out = batch_norm(&input, &mut params, BatchNormMode::Infer).unwrap();
        for (o, i) in out.data().iter().zip(input.data()) {
            assert!((o - (2.0 * i + 3.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running_stats() {
        let input = tensor(&[4, 1], &[2.0, 4.0, 6.0, 8.0]);
        let mut params = BatchNormParams::passthrough(1, 1e-9, 0.5).unwrap();
        let out = batch_norm(&input, &mut params, BatchNormMode::Train).unwrap();
        let mean: f64 = out.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-10);
        // momentum 0.5 folds half the batch stats in.
        assert!((params.running_mean.data()[0] - 2.5).abs() < 1e-12);
        assert!((params.running_var.data()[0] - (0.5 + 0.5 * 5.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_statistics_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let input = Tensor::<f64>::randn(&[4, 2, 5, 5], 1.7, &mut rng).unwrap();
        let mut params = BatchNormParams::passthrough(2, 1e-9, 0.1).unwrap();
        let out = batch_norm(&input, &mut params, BatchNormMode::Train).unwrap();
        // Independent recomputation of the per-channel statistics.
        for c in 0..2 {
            let mut values = Vec::new();
            for b in 0..4 {
                for i in 0..25 {
                    values.push(out.data()[(b * 2 + c) * 25 + i]);
                }
            }
            let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
            let var: f64 =
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
            assert!(mean.abs() <= 1e-10, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-6, "channel {c} var {var}");
        }
    }

    #[test]
    fn relu_sign_cases() {
        let out = relu(&tensor(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero_and_extremes() {
        let out = sigmoid(&tensor(&[3], &[0.0, 50.0, -50.0]));
        assert_eq!(out.data()[0], 0.5);
        assert!(out.data()[1] < 1.0 && out.data()[1] > 0.99);
        assert!(out.data()[2] > 0.0 && out.data()[2] < 0.01);
        assert!(out.all_finite());
    }

    #[test]
    fn global_avg_pool_hand_case() {
        let input = tensor(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = global_avg_pool(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert!((out.data()[0] - 3.5).abs() < 1e-15);
    }

    #[test]
    fn affine_identity_weights() {
        let input = tensor(&[1, 2], &[1.0, 2.0]);
        let eye = tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let out = affine(&input, &eye, &Tensor::zeros(&[2]).unwrap()).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn affine_rejects_dimension_mismatch() {
        let input = Tensor::<f64>::zeros(&[1, 3]).unwrap();
        let w = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        assert!(matches!(
            affine(&input, &w, &Tensor::zeros(&[2]).unwrap()),
            Err(TensorError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let input = Tensor::<f64>::zeros(&[1, 4]).unwrap();
        assert!(l2_normalize_rows(&input).is_err());
    }
}
