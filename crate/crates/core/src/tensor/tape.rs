//! Reverse-mode differentiation over a recorded graph of the fixed op
//! vocabulary. Forward values are computed eagerly as nodes are recorded;
//! `backward` walks the tape in reverse and accumulates gradients for every
//! leaf and intermediate.

use crate::scalar::Scalar;

use super::ops::{self, channel_layout, sigmoid_scalar};
use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<S> {
    Leaf,
    Conv2d {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        epsilon: S,
        // Statistics the forward pass normalized with (batch stats in train
        // mode, running stats in infer mode).
        mean: Vec<S>,
        var: Vec<S>,
        train: bool,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Tanh {
        input: NodeId,
    },
    Affine {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    L2NormalizeRows {
        input: NodeId,
    },
    Scale {
        input: NodeId,
        factor: S,
    },
    /// scores[i][j] = dot(images[i], captions[i * group + j])
    PairedDot {
        images: NodeId,
        captions: NodeId,
        group: usize,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Tensor<S>,
    },
    /// Mean over rows of -log softmax(row)[0]; column 0 holds the positive.
    RankSoftmaxLoss {
        scores: NodeId,
    },
    SumAll {
        input: NodeId,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Gradients of a scalar loss with respect to every tape node.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node that is known to participate in the loss.
    pub fn expect(&self, id: NodeId) -> &Tensor<S> {
        self.get(id).expect("node participates in the loss")
    }
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let params = ops::ConvParams::new(
            self.value(weights).clone(),
            self.value(bias).clone(),
            stride,
            padding,
        )?;
        let out = ops::conv2d(self.value(input), &params)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weights,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Train-mode batch normalization. Returns the node plus the batch
    /// statistics so the caller can update its running estimates.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        epsilon: S,
    ) -> Result<(NodeId, Vec<S>, Vec<S>), TensorError> {
        let x = self.value(input);
        if x.rank() != 2 && x.rank() != 4 {
            return Err(TensorError::RankMismatch {
                op: "batch_norm",
                expected: 4,
                shape: x.shape().to_vec(),
            });
        }
        let (_, channels) = channel_layout(x.shape());
        if channels != self.value(gamma).numel() || channels != self.value(beta).numel() {
            return Err(TensorError::ChannelMismatch {
                op: "batch_norm",
                expected: self.value(gamma).numel(),
                got: channels,
            });
        }
        let stats = ops::channel_stats(x);
        let out = ops::apply_channel_affine(
            x,
            &stats.mean,
            &stats.var,
            self.value(gamma).data(),
            self.value(beta).data(),
            epsilon,
        );
        let node = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                epsilon,
                mean: stats.mean.clone(),
                var: stats.var.clone(),
                train: true,
            },
        );
        Ok((node, stats.mean, stats.var))
    }

    /// Infer-mode batch normalization against frozen running statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[S],
        running_var: &[S],
        epsilon: S,
    ) -> Result<NodeId, TensorError> {
        let x = self.value(input);
        let (_, channels) = channel_layout(x.shape());
        if channels != running_mean.len() || channels != self.value(gamma).numel() {
            return Err(TensorError::ChannelMismatch {
                op: "batch_norm",
                expected: running_mean.len(),
                got: channels,
            });
        }
        let out = ops::apply_channel_affine(
            x,
            running_mean,
            running_var,
            self.value(gamma).data(),
            self.value(beta).data(),
            epsilon,
        );
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                epsilon,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
                train: false,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = ops::sigmoid(self.value(input));
        self.push(out, Op::Sigmoid { input })
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        let out = ops::tanh(self.value(input));
        self.push(out, Op::Tanh { input })
    }

    pub fn affine(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let out = ops::affine(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Affine {
                input,
                weights,
                bias,
            },
        ))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let out = ops::global_avg_pool(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool { input }))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        let out = ops::add(self.value(lhs), self.value(rhs))?;
        Ok(self.push(out, Op::Add { lhs, rhs }))
    }

    pub fn l2_normalize_rows(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let out = ops::l2_normalize_rows(self.value(input))?;
        Ok(self.push(out, Op::L2NormalizeRows { input }))
    }

    pub fn scale(&mut self, input: NodeId, factor: S) -> NodeId {
        let out = self.value(input).map(|v| v * factor);
        self.push(out, Op::Scale { input, factor })
    }

    /// Cosine-style score matrix between per-row unit images `(N x D)` and
    /// grouped captions `((N * group) x D)`.
    pub fn paired_dot(
        &mut self,
        images: NodeId,
        captions: NodeId,
        group: usize,
    ) -> Result<NodeId, TensorError> {
        let img = self.value(images);
        let cap = self.value(captions);
        if img.rank() != 2 || cap.rank() != 2 || cap.shape()[1] != img.shape()[1] {
            return Err(TensorError::DimensionMismatch {
                op: "paired_dot",
                lhs: img.shape().to_vec(),
                rhs: cap.shape().to_vec(),
            });
        }
        let (n, d) = (img.shape()[0], img.shape()[1]);
        if group == 0 || cap.shape()[0] != n * group {
            return Err(TensorError::DimensionMismatch {
                op: "paired_dot",
                lhs: vec![n * group, d],
                rhs: cap.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(n * group);
        for i in 0..n {
            let img_row = &img.data()[i * d..(i + 1) * d];
            for j in 0..group {
                let cap_row = &cap.data()[(i * group + j) * d..(i * group + j + 1) * d];
                let mut dot = S::zero();
                for (a, b) in img_row.iter().zip(cap_row.iter()) {
                    dot += *a * *b;
                }
                out.push(dot);
            }
        }
        let value = Tensor::new(&[n, group], out)?;
        Ok(self.push(
            value,
            Op::PairedDot {
                images,
                captions,
                group,
            },
        ))
    }

    /// Mean elementwise binary cross-entropy on sigmoid(logits) against
    /// targets in [0, 1], computed in a stable logit form.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: &Tensor<S>,
    ) -> Result<NodeId, TensorError> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(TensorError::DimensionMismatch {
                op: "bce_with_logits",
                lhs: z.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let numel = S::from_f64_lossy(z.numel() as f64);
        let mut total = S::zero();
        for (&zv, &tv) in z.data().iter().zip(targets.data().iter()) {
            let pos = if zv > S::zero() { zv } else { S::zero() };
            total += pos - zv * tv + (S::one() + (-zv.abs()).exp()).ln();
        }
        let value = Tensor::new(&[1], vec![total / numel])?;
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    /// Reduce every element to a single scalar sum.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total = self.value(input).data().iter().copied().sum::<S>();
        let value = Tensor::new(&[1], vec![total]).expect("scalar shape");
        self.push(value, Op::SumAll { input })
    }

    pub fn rank_softmax_loss(&mut self, scores: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(scores);
        if s.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "rank_softmax_loss",
                expected: 2,
                shape: s.shape().to_vec(),
            });
        }
        let (n, k) = (s.shape()[0], s.shape()[1]);
        let mut total = S::zero();
        for i in 0..n {
            let row = &s.data()[i * k..(i + 1) * k];
            total += log_sum_exp(row) - row[0];
        }
        let value = Tensor::new(&[1], vec![total / S::from_f64_lossy(n as f64)])?;
        Ok(self.push(value, Op::RankSoftmaxLoss { scores }))
    }

    /// Gradients of the scalar `loss` node with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>, TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::BadNodeId {
                node: loss.0,
                len: self.nodes.len(),
            });
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), S::one())?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weights,
                bias,
                stride,
                padding,
            } => {
                let (gi, gw, gb) = conv2d_backward(
                    self.value(*input),
                    self.value(*weights),
                    g,
                    *stride,
                    *padding,
                )?;
                accumulate(grads, *input, gi)?;
                accumulate(grads, *weights, gw)?;
                accumulate(grads, *bias, gb)?;
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                epsilon,
                mean,
                var,
                train,
            } => {
                let (gi, gg, gb) = batch_norm_backward(
                    self.value(*input),
                    self.value(*gamma).data(),
                    mean,
                    var,
                    *epsilon,
                    g,
                    *train,
                )?;
                accumulate(grads, *input, gi)?;
                accumulate(grads, *gamma, gg)?;
                accumulate(grads, *beta, gb)?;
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&xv, &gv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect();
                accumulate(grads, *input, Tensor::new(x.shape(), data)?)?;
            }
            Op::Sigmoid { input } => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&yv, &gv)| gv * yv * (S::one() - yv))
                    .collect();
                accumulate(grads, *input, Tensor::new(y.shape(), data)?)?;
            }
            Op::Tanh { input } => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&yv, &gv)| gv * (S::one() - yv * yv))
                    .collect();
                accumulate(grads, *input, Tensor::new(y.shape(), data)?)?;
            }
            Op::Affine {
                input,
                weights,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weights);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let k = w.shape()[1];
                let mut gi = vec![S::zero(); n * d];
                let mut gw = vec![S::zero(); d * k];
                let mut gb = vec![S::zero(); k];
                for row in 0..n {
                    let g_row = &g.data()[row * k..(row + 1) * k];
                    let x_row = &x.data()[row * d..(row + 1) * d];
                    for col in 0..k {
                        gb[col] += g_row[col];
                    }
                    for i in 0..d {
                        let w_row = &w.data()[i * k..(i + 1) * k];
                        let mut acc = S::zero();
                        for (gv, wv) in g_row.iter().zip(w_row.iter()) {
                            acc += *gv * *wv;
                        }
                        gi[row * d + i] += acc;
                        let xv = x_row[i];
                        let gw_row = &mut gw[i * k..(i + 1) * k];
                        for (slot, gv) in gw_row.iter_mut().zip(g_row.iter()) {
                            *slot += xv * *gv;
                        }
                    }
                }
                accumulate(grads, *input, Tensor::new(&[n, d], gi)?)?;
                accumulate(grads, *weights, Tensor::new(&[d, k], gw)?)?;
                accumulate(grads, *bias, Tensor::new(&[k], gb)?)?;
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let inv = S::one() / S::from_f64_lossy((h * w) as f64);
                let mut gi = Vec::with_capacity(x.numel());
                for i in 0..n * c {
                    let gv = g.data()[i] * inv;
                    gi.extend(std::iter::repeat_n(gv, h * w));
                }
                accumulate(grads, *input, Tensor::new(x.shape(), gi)?)?;
            }
            Op::Add { lhs, rhs } => {
                accumulate(grads, *lhs, g.clone())?;
                accumulate(grads, *rhs, g.clone())?;
            }
            Op::L2NormalizeRows { input } => {
                let x = self.value(*input);
                let y = &node.value;
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let mut gi = Vec::with_capacity(n * d);
                for row in 0..n {
                    let x_row = &x.data()[row * d..(row + 1) * d];
                    let y_row = &y.data()[row * d..(row + 1) * d];
                    let g_row = &g.data()[row * d..(row + 1) * d];
                    let norm = x_row.iter().map(|&v| v * v).sum::<S>().sqrt();
                    let mut dot = S::zero();
                    for (gv, yv) in g_row.iter().zip(y_row.iter()) {
                        dot += *gv * *yv;
                    }
                    for i in 0..d {
                        gi.push((g_row[i] - y_row[i] * dot) / norm);
                    }
                }
                accumulate(grads, *input, Tensor::new(x.shape(), gi)?)?;
            }
            Op::Scale { input, factor } => {
                accumulate(grads, *input, g.map(|v| v * *factor))?;
            }
            Op::PairedDot {
                images,
                captions,
                group,
            } => {
                let img = self.value(*images);
                let cap = self.value(*captions);
                let (n, d) = (img.shape()[0], img.shape()[1]);
                let mut gi = vec![S::zero(); n * d];
                let mut gc = vec![S::zero(); cap.numel()];
                for i in 0..n {
                    for j in 0..*group {
                        let gv = g.data()[i * group + j];
                        if gv == S::zero() {
                            continue;
                        }
                        let cap_base = (i * group + j) * d;
                        for k in 0..d {
                            gi[i * d + k] += gv * cap.data()[cap_base + k];
                            gc[cap_base + k] += gv * img.data()[i * d + k];
                        }
                    }
                }
                accumulate(grads, *images, Tensor::new(img.shape(), gi)?)?;
                accumulate(grads, *captions, Tensor::new(cap.shape(), gc)?)?;
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let scale = g.scalar_value() / S::from_f64_lossy(z.numel() as f64);
                let data = z
                    .data()
                    .iter()
                    .zip(targets.data().iter())
                    .map(|(&zv, &tv)| (sigmoid_scalar(zv) - tv) * scale)
                    .collect();
                accumulate(grads, *logits, Tensor::new(z.shape(), data)?)?;
            }
            Op::SumAll { input } => {
                let x = self.value(*input);
                let gv = g.scalar_value();
                accumulate(grads, *input, Tensor::full(x.shape(), gv)?)?;
            }
            Op::RankSoftmaxLoss { scores } => {
                let s = self.value(*scores);
                let (n, k) = (s.shape()[0], s.shape()[1]);
                let scale = g.scalar_value() / S::from_f64_lossy(n as f64);
                let mut gs = Vec::with_capacity(n * k);
                for i in 0..n {
                    let row = &s.data()[i * k..(i + 1) * k];
                    let lse = log_sum_exp(row);
                    for (j, &v) in row.iter().enumerate() {
                        let soft = (v - lse).exp();
                        let indicator = if j == 0 { S::one() } else { S::zero() };
                        gs.push((soft - indicator) * scale);
                    }
                }
                accumulate(grads, *scores, Tensor::new(s.shape(), gs)?)?;
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(
    grads: &mut [Option<Tensor<S>>],
    id: NodeId,
    delta: Tensor<S>,
) -> Result<(), TensorError> {
    match &mut grads[id.0] {
        Some(existing) => {
            *existing = ops::add(existing, &delta)?;
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let sum = row.iter().map(|&v| (v - max).exp()).sum::<S>();
    max + sum.ln()
}

/// (input, weight-like, bias-like) gradient triple.
type GradTriple<S> = (Tensor<S>, Tensor<S>, Tensor<S>);

#[allow(clippy::needless_range_loop)]
fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    g: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<GradTriple<S>, TensorError> {
    let [n, in_c, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let [out_c, _, kh, kw] = [
        weights.shape()[0],
        weights.shape()[1],
        weights.shape()[2],
        weights.shape()[3],
    ];
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let pad = padding as isize;

    let mut gi = vec![S::zero(); input.numel()];
    let mut gw = vec![S::zero(); weights.numel()];
    let mut gb = vec![S::zero(); out_c];

    for b in 0..n {
        for oc in 0..out_c {
            let g_plane = &g.data()[(b * out_c + oc) * oh * ow..(b * out_c + oc + 1) * oh * ow];
            for &gv in g_plane {
                gb[oc] += gv;
            }
            for ic in 0..in_c {
                let in_plane = &input.data()[(b * in_c + ic) * h * w..(b * in_c + ic + 1) * h * w];
                let gi_plane = &mut gi[(b * in_c + ic) * h * w..(b * in_c + ic + 1) * h * w];
                for r in 0..kh {
                    for c in 0..kw {
                        let w_idx = ((oc * in_c + ic) * kh + r) * kw + c;
                        let wv = weights.data()[w_idx];
                        let mut wg = S::zero();
                        let col_off = c as isize - pad;
                        let (lo, hi) = ops::col_bounds(col_off, stride, w, ow);
                        if lo >= hi {
                            continue;
                        }
                        for orow in 0..oh {
                            let irow = (orow * stride + r) as isize - pad;
                            if irow < 0 || irow >= h as isize {
                                continue;
                            }
                            let in_row =
                                &in_plane[irow as usize * w..(irow as usize + 1) * w];
                            let gi_row = &mut gi_plane[irow as usize * w..(irow as usize + 1) * w];
                            let g_row = &g_plane[orow * ow..(orow + 1) * ow];
                            let in_base = ((lo * stride) as isize + col_off) as usize;
                            if stride == 1 {
                                let in_seg = &in_row[in_base..in_base + (hi - lo)];
                                let gi_seg = &mut gi_row[in_base..in_base + (hi - lo)];
                                for ((&gv, &xv), gslot) in
                                    g_row[lo..hi].iter().zip(in_seg.iter()).zip(gi_seg.iter_mut())
                                {
                                    wg += gv * xv;
                                    *gslot += gv * wv;
                                }
                            } else {
                                let mut icol = in_base;
                                for &gv in &g_row[lo..hi] {
                                    wg += gv * in_row[icol];
                                    gi_row[icol] += gv * wv;
                                    icol += stride;
                                }
                            }
                        }
                        gw[w_idx] += wg;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), gi)?,
        Tensor::new(weights.shape(), gw)?,
        Tensor::new(&[out_c], gb)?,
    ))
}

fn batch_norm_backward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &[S],
    mean: &[S],
    var: &[S],
    epsilon: S,
    g: &Tensor<S>,
    train: bool,
) -> Result<GradTriple<S>, TensorError> {
    let (slab, channels) = channel_layout(input.shape());
    let row = channels * slab;
    let n = input.numel() / row;
    let m = S::from_f64_lossy((n * slab) as f64);

    let mut gi = vec![S::zero(); input.numel()];
    let mut gg = vec![S::zero(); channels];
    let mut gb = vec![S::zero(); channels];

    for c in 0..channels {
        let inv_std = S::one() / (var[c] + epsilon).sqrt();
        let mut sum_g = S::zero();
        let mut sum_gx = S::zero();
        for b in 0..n {
            let base = b * row + c * slab;
            for i in 0..slab {
                let xhat = (input.data()[base + i] - mean[c]) * inv_std;
                let gv = g.data()[base + i];
                sum_g += gv;
                sum_gx += gv * xhat;
            }
        }
        gg[c] = sum_gx;
        gb[c] = sum_g;
        let mean_g = sum_g / m;
        let mean_gx = sum_gx / m;
        for b in 0..n {
            let base = b * row + c * slab;
            for i in 0..slab {
                let xhat = (input.data()[base + i] - mean[c]) * inv_std;
                let gv = g.data()[base + i];
                gi[base + i] = if train {
                    gamma[c] * inv_std * (gv - mean_g - xhat * mean_gx)
                } else {
                    gamma[c] * inv_std * gv
                };
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), gi)?,
        Tensor::new(&[channels], gg)?,
        Tensor::new(&[channels], gb)?,
    ))
}
