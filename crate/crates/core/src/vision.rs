//! Residual-network concept detector: a stack of residual units with a
//! multi-label sigmoid head, trained with per-tag binary cross-entropy and
//! applied fully convolutionally to images of any size.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::io::{Checkpoint, FormatError};
use crate::tensor::ops::{
    self, affine, batch_norm_frozen, conv2d, global_avg_pool, relu, sigmoid, BatchNormParams,
    ConvParams,
};
use crate::tensor::sgd::sgd_step;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("vocabulary tag {0:?} is duplicated")]
    DuplicateTag(String),
    #[error("vocabulary tag {0:?} is not lowercase")]
    NotLowercase(String),
    #[error("network config does not compose: unit {unit} reduces spatial extent to zero at image size {image_size}")]
    NonComposing { unit: usize, image_size: usize },
    #[error("image {got_h}x{got_w} is too small; minimum is {min_h}x{min_w}")]
    ImageTooSmall {
        min_h: usize,
        min_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("example {index} uses tag {tag:?} which is not in the vocabulary")]
    UnknownTag { index: usize, tag: String },
    #[error("example {index} has image shape {shape:?}, expected 3x{size}x{size}")]
    BadImageShape {
        index: usize,
        shape: Vec<usize>,
        size: usize,
    },
    #[error("residual unit invariant violated: {0}")]
    BadUnit(String),
    #[error("checkpoint metadata error: {0}")]
    Metadata(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VocabSource {
    #[serde(rename = "coco-style")]
    CocoStyle,
    #[serde(rename = "web-style")]
    WebStyle,
}

/// Ordered set of unique lowercase tags with an index bijection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVocabulary {
    tags: Vec<String>,
    pub source: VocabSource,
}

impl TagVocabulary {
    pub fn new(tags: Vec<String>, source: VocabSource) -> Result<Self, VisionError> {
        let mut seen = BTreeSet::new();
        for tag in &tags {
            if tag.chars().any(|c| c.is_uppercase()) {
                return Err(VisionError::NotLowercase(tag.clone()));
            }
            if !seen.insert(tag.clone()) {
                return Err(VisionError::DuplicateTag(tag.clone()));
            }
        }
        Ok(Self { tags, source })
    }

    /// Vocabulary file: one tag per line, UTF-8.
    pub fn load(path: &Path, source: VocabSource) -> Result<Self, VisionError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VisionError::Metadata(format!("cannot read {}: {e}", path.display())))?;
        let tags = text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        Self::new(tags, source)
    }

    pub fn save(&self, path: &Path) -> Result<(), VisionError> {
        let mut text = self.tags.join("\n");
        text.push('\n');
        std::fs::write(path, text)
            .map_err(|e| VisionError::Metadata(format!("cannot write {}: {e}", path.display())))
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }
}

/// Per-tag sigmoid scores; not normalized across tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDetections {
    pub tags: Vec<String>,
    pub scores: Vec<f64>,
}

impl ConceptDetections {
    /// Tags scoring at or above the threshold, highest first.
    pub fn above_threshold(&self, threshold: f64) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .tags
            .iter()
            .cloned()
            .zip(self.scores.iter().copied())
            .filter(|(_, s)| *s >= threshold)
            .collect();
        out.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        out
    }
}

/// Union of two detections; overlapping tags keep the maximum score.
pub fn dual_detector(a: &ConceptDetections, b: &ConceptDetections) -> ConceptDetections {
    let mut merged: Vec<(String, f64)> = a
        .tags
        .iter()
        .cloned()
        .zip(a.scores.iter().copied())
        .collect();
    for (tag, score) in b.tags.iter().zip(b.scores.iter()) {
        match merged.iter_mut().find(|(t, _)| t == tag) {
            Some((_, existing)) => *existing = existing.max(*score),
            None => merged.push((tag.clone(), *score)),
        }
    }
    ConceptDetections {
        tags: merged.iter().map(|(t, _)| t.clone()).collect(),
        scores: merged.iter().map(|(_, s)| *s).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_padding: usize,
    pub units: Vec<UnitConfig>,
    /// Canonical training image size (square).
    pub image_size: usize,
    pub epsilon: f64,
    pub momentum: f64,
}

impl NetConfig {
    /// Desk-scale default: stem + 4 residual units, widths 16/32/64 on 32x32.
    pub fn desk_default() -> Self {
        Self {
            input_channels: 3,
            stem_channels: 16,
            stem_kernel: 3,
            stem_stride: 2,
            stem_padding: 1,
            units: vec![
                UnitConfig { in_channels: 16, out_channels: 16, stride: 1 },
                UnitConfig { in_channels: 16, out_channels: 32, stride: 2 },
                UnitConfig { in_channels: 32, out_channels: 64, stride: 2 },
                UnitConfig { in_channels: 64, out_channels: 64, stride: 1 },
            ],
            image_size: 32,
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    /// Narrower companion detector for the second vocabulary.
    pub fn desk_small() -> Self {
        Self {
            input_channels: 3,
            stem_channels: 12,
            stem_kernel: 3,
            stem_stride: 2,
            stem_padding: 1,
            units: vec![
                UnitConfig { in_channels: 12, out_channels: 24, stride: 2 },
                UnitConfig { in_channels: 24, out_channels: 48, stride: 2 },
            ],
            image_size: 32,
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn final_channels(&self) -> usize {
        self.units
            .last()
            .map(|u| u.out_channels)
            .unwrap_or(self.stem_channels)
    }
}

#[derive(Debug, Clone)]
pub enum Shortcut<S> {
    Identity,
    Projection(ConvParams<S>),
}

/// Post-activation residual unit: `relu(h(x) + F(x))` where `F` is
/// conv-bn-relu-conv-bn and `h` is identity or a 1x1 projection.
#[derive(Debug, Clone)]
pub struct ResidualUnit<S> {
    pub conv1: ConvParams<S>,
    pub bn1: BatchNormParams<S>,
    pub conv2: ConvParams<S>,
    pub bn2: BatchNormParams<S>,
    pub shortcut: Shortcut<S>,
}

impl<S: Scalar> ResidualUnit<S> {
    pub fn validate(&self, in_channels: usize) -> Result<(), VisionError> {
        if self.conv1.in_channels() != in_channels {
            return Err(VisionError::BadUnit(format!(
                "conv1 expects {} input channels, unit receives {in_channels}",
                self.conv1.in_channels()
            )));
        }
        if self.conv2.in_channels() != self.conv1.out_channels() {
            return Err(VisionError::BadUnit(
                "conv2 input channels must equal conv1 output channels".into(),
            ));
        }
        let stride_product = self.conv1.stride * self.conv2.stride;
        match &self.shortcut {
            Shortcut::Identity => {
                if self.conv2.out_channels() != in_channels {
                    return Err(VisionError::BadUnit(format!(
                        "identity shortcut requires conv2 output {} to equal input channels {in_channels}",
                        self.conv2.out_channels()
                    )));
                }
                if stride_product != 1 {
                    return Err(VisionError::BadUnit(
                        "identity shortcut requires unit stride product 1".into(),
                    ));
                }
            }
            Shortcut::Projection(proj) => {
                if proj.in_channels() != in_channels
                    || proj.out_channels() != self.conv2.out_channels()
                    || proj.stride != stride_product
                {
                    return Err(VisionError::BadUnit(
                        "projection shortcut shape does not match residual branch".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Single forward pass through a residual unit with frozen batch-norm
/// statistics.
pub fn residual_unit_forward<S: Scalar>(
    input: &Tensor<S>,
    unit: &ResidualUnit<S>,
) -> Result<Tensor<S>, TensorError> {
    let mut branch = conv2d(input, &unit.conv1)?;
    branch = batch_norm_frozen(&branch, &unit.bn1)?;
    branch = relu(&branch);
    branch = conv2d(&branch, &unit.conv2)?;
    branch = batch_norm_frozen(&branch, &unit.bn2)?;
    let shortcut = match &unit.shortcut {
        Shortcut::Identity => input.clone(),
        Shortcut::Projection(proj) => conv2d(input, proj)?,
    };
    Ok(relu(&ops::add(&shortcut, &branch)?))
}

/// Residual network with a multi-label sigmoid head.
#[derive(Debug, Clone)]
pub struct VisionNet<S> {
    pub config: NetConfig,
    pub stem_conv: ConvParams<S>,
    pub stem_bn: BatchNormParams<S>,
    pub units: Vec<ResidualUnit<S>>,
    pub head_weights: Tensor<S>,
    pub head_bias: Tensor<S>,
    pub vocabulary: TagVocabulary,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Halve the learning rate after every this many epochs (0 = never).
    pub halve_lr_every: usize,
    pub weight_decay: f64,
    /// Horizontal-flip augmentation (labels are flip-invariant).
    pub horizontal_flip: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        Self {
            epochs: 14,
            batch_size: 32,
            learning_rate: 0.2,
            halve_lr_every: 6,
            weight_decay: 1e-4,
            horizontal_flip: true,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Deterministic He-style initialization of the full network from a seed.
pub fn build_network<S: Scalar>(
    config: &NetConfig,
    vocabulary: TagVocabulary,
    seed: u64,
) -> Result<VisionNet<S>, VisionError> {
    validate_composition(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = S::from_f64_lossy(config.epsilon);
    let momentum = S::from_f64_lossy(config.momentum);

    let stem_conv = he_conv(
        config.stem_channels,
        config.input_channels,
        config.stem_kernel,
        config.stem_stride,
        config.stem_padding,
        &mut rng,
    )?;
    let stem_bn = BatchNormParams::passthrough(config.stem_channels, eps, momentum)?;

    let mut units = Vec::with_capacity(config.units.len());
    for uc in &config.units {
        let conv1 = he_conv(uc.out_channels, uc.in_channels, 3, uc.stride, 1, &mut rng)?;
        let bn1 = BatchNormParams::passthrough(uc.out_channels, eps, momentum)?;
        let conv2 = he_conv(uc.out_channels, uc.out_channels, 3, 1, 1, &mut rng)?;
        let bn2 = BatchNormParams::passthrough(uc.out_channels, eps, momentum)?;
        let shortcut = if uc.in_channels == uc.out_channels && uc.stride == 1 {
            Shortcut::Identity
        } else {
            Shortcut::Projection(he_conv(uc.out_channels, uc.in_channels, 1, uc.stride, 0, &mut rng)?)
        };
        let unit = ResidualUnit { conv1, bn1, conv2, bn2, shortcut };
        unit.validate(uc.in_channels)?;
        units.push(unit);
    }

    let c_final = config.final_channels();
    let v = vocabulary.len();
    let head_std = (1.0 / c_final as f64).sqrt();
    let head_weights = Tensor::randn(&[c_final, v.max(1)], head_std, &mut rng)?;
    let head_bias = Tensor::zeros(&[v.max(1)])?;

    Ok(VisionNet {
        config: config.clone(),
        stem_conv,
        stem_bn,
        units,
        head_weights,
        head_bias,
        vocabulary,
        seed,
    })
}

fn he_conv<S: Scalar>(
    out_c: usize,
    in_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    rng: &mut impl Rng,
) -> Result<ConvParams<S>, TensorError> {
    let fan_in = (in_c * kernel * kernel) as f64;
    let std = (2.0 / fan_in).sqrt();
    let weights = Tensor::randn(&[out_c, in_c, kernel, kernel], std, rng)?;
    ConvParams::new(weights, Tensor::zeros(&[out_c])?, stride, padding)
}

fn validate_composition(config: &NetConfig) -> Result<(), VisionError> {
    let mut extent = config.image_size;
    let stem_in = extent + 2 * config.stem_padding;
    if stem_in < config.stem_kernel {
        return Err(VisionError::NonComposing { unit: 0, image_size: config.image_size });
    }
    extent = (stem_in - config.stem_kernel) / config.stem_stride + 1;
    for (i, uc) in config.units.iter().enumerate() {
        let padded = extent + 2;
        if padded < 3 || (padded - 3) / uc.stride + 1 == 0 {
            return Err(VisionError::NonComposing { unit: i + 1, image_size: config.image_size });
        }
        extent = (padded - 3) / uc.stride + 1;
    }
    Ok(())
}

impl<S: Scalar> VisionNet<S> {
    /// Spatial shape of the final feature map for an `h x w` input.
    pub fn feature_shape(&self, h: usize, w: usize) -> Result<(usize, usize, usize), VisionError> {
        let (min_h, min_w) = self.min_input_size();
        if h < min_h || w < min_w {
            return Err(VisionError::ImageTooSmall { min_h, min_w, got_h: h, got_w: w });
        }
        let step = |e: usize, k: usize, s: usize, p: usize| (e + 2 * p - k) / s + 1;
        let mut eh = step(h, self.config.stem_kernel, self.config.stem_stride, self.config.stem_padding);
        let mut ew = step(w, self.config.stem_kernel, self.config.stem_stride, self.config.stem_padding);
        for uc in &self.config.units {
            eh = step(eh, 3, uc.stride, 1);
            ew = step(ew, 3, uc.stride, 1);
        }
        Ok((self.config.final_channels(), eh, ew))
    }

    /// Smallest accepted input size.
    pub fn min_input_size(&self) -> (usize, usize) {
        for size in 1..=64 {
            if self.extent_ok(size) {
                return (size, size);
            }
        }
        (64, 64)
    }

    fn extent_ok(&self, size: usize) -> bool {
        let mut extent = size + 2 * self.config.stem_padding;
        if extent < self.config.stem_kernel {
            return false;
        }
        extent = (extent - self.config.stem_kernel) / self.config.stem_stride + 1;
        for uc in &self.config.units {
            if extent + 2 < 3 {
                return false;
            }
            extent = (extent + 2 - 3) / uc.stride + 1;
            if extent == 0 {
                return false;
            }
        }
        extent >= 1
    }

    /// Convolutional stack then global average pooling: the pooled
    /// pre-sigmoid channel vector, computed once per image of any size.
    pub fn pooled_features(&self, image: &Tensor<S>) -> Result<Vec<S>, VisionError> {
        if image.rank() != 3 || image.shape()[0] != self.config.input_channels {
            return Err(VisionError::BadImageShape {
                index: 0,
                shape: image.shape().to_vec(),
                size: self.config.image_size,
            });
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        self.feature_shape(h, w)?;
        let batched = image.reshape(&[1, self.config.input_channels, h, w])?;
        let pooled = self.forward_pooled_batch(&batched)?;
        Ok(pooled.into_data())
    }

    /// Frozen-statistics forward over a batch, through global pooling.
    fn forward_pooled_batch(&self, images: &Tensor<S>) -> Result<Tensor<S>, VisionError> {
        let mut x = conv2d(images, &self.stem_conv)?;
        x = batch_norm_frozen(&x, &self.stem_bn)?;
        x = relu(&x);
        for unit in &self.units {
            x = residual_unit_forward(&x, unit)?;
        }
        Ok(global_avg_pool(&x)?)
    }

    /// Full multi-label inference: conv stack, pooling, affine head, sigmoid.
    pub fn detect_concepts(&self, image: &Tensor<S>) -> Result<ConceptDetections, VisionError> {
        let pooled = self.pooled_features(image)?;
        self.detect_from_pooled(&pooled)
    }

    /// Head and sigmoid over an already pooled channel vector.
    pub fn detect_from_pooled(&self, pooled: &[S]) -> Result<ConceptDetections, VisionError> {
        let pooled = Tensor::new(&[1, pooled.len()], pooled.to_vec())?;
        let logits = affine(&pooled, &self.head_weights, &self.head_bias)?;
        let scores = sigmoid(&logits);
        Ok(ConceptDetections {
            tags: self.vocabulary.tags().to_vec(),
            scores: scores.data().iter().map(|v| v.to_f64_lossy()).collect(),
        })
    }

    /// Visit every trainable parameter in a fixed order.
    fn visit_params_mut(&mut self, mut f: impl FnMut(&mut Tensor<S>)) {
        f(&mut self.stem_conv.weights);
        f(&mut self.stem_conv.bias);
        f(&mut self.stem_bn.gamma);
        f(&mut self.stem_bn.beta);
        for unit in &mut self.units {
            f(&mut unit.conv1.weights);
            f(&mut unit.conv1.bias);
            f(&mut unit.bn1.gamma);
            f(&mut unit.bn1.beta);
            f(&mut unit.conv2.weights);
            f(&mut unit.conv2.bias);
            f(&mut unit.bn2.gamma);
            f(&mut unit.bn2.beta);
            if let Shortcut::Projection(proj) = &mut unit.shortcut {
                f(&mut proj.weights);
                f(&mut proj.bias);
            }
        }
        f(&mut self.head_weights);
        f(&mut self.head_bias);
    }

    fn collect_params(&self) -> Vec<Tensor<S>> {
        let mut out = vec![
            self.stem_conv.weights.clone(),
            self.stem_conv.bias.clone(),
            self.stem_bn.gamma.clone(),
            self.stem_bn.beta.clone(),
        ];
        for unit in &self.units {
            out.push(unit.conv1.weights.clone());
            out.push(unit.conv1.bias.clone());
            out.push(unit.bn1.gamma.clone());
            out.push(unit.bn1.beta.clone());
            out.push(unit.conv2.weights.clone());
            out.push(unit.conv2.bias.clone());
            out.push(unit.bn2.gamma.clone());
            out.push(unit.bn2.beta.clone());
            if let Shortcut::Projection(proj) = &unit.shortcut {
                out.push(proj.weights.clone());
                out.push(proj.bias.clone());
            }
        }
        out.push(self.head_weights.clone());
        out.push(self.head_bias.clone());
        out
    }

    fn visit_bns_mut(&mut self, mut f: impl FnMut(&mut BatchNormParams<S>)) {
        f(&mut self.stem_bn);
        for unit in &mut self.units {
            f(&mut unit.bn1);
            f(&mut unit.bn2);
        }
    }

    /// One training step over a batch; returns the batch loss.
    fn train_batch(
        &mut self,
        images: &Tensor<S>,
        targets: &Tensor<S>,
        lr: S,
        weight_decay: S,
    ) -> Result<f64, VisionError> {
        let mut tape = Tape::new();
        let params = self.collect_params();
        let param_ids: Vec<NodeId> = params.into_iter().map(|p| tape.leaf(p)).collect();
        let x = tape.leaf(images.clone());

        let mut cursor = 0usize;
        let mut next = || {
            let id = param_ids[cursor];
            cursor += 1;
            id
        };
        let eps = S::from_f64_lossy(self.config.epsilon);
        let mut bn_updates: Vec<(Vec<S>, Vec<S>)> = Vec::new();

        // Stem.
        let w = next();
        let b = next();
        let mut h = tape.conv2d(x, w, b, self.config.stem_stride, self.config.stem_padding)?;
        let gamma = next();
        let beta = next();
        let (hbn, mean, var) = tape.batch_norm_train(h, gamma, beta, eps)?;
        bn_updates.push((mean, var));
        h = tape.relu(hbn);

        for unit in &self.units {
            let input = h;
            let w1 = next();
            let b1 = next();
            let mut branch = tape.conv2d(input, w1, b1, unit.conv1.stride, unit.conv1.padding)?;
            let g1 = next();
            let be1 = next();
            let (bn1, m1, v1) = tape.batch_norm_train(branch, g1, be1, eps)?;
            bn_updates.push((m1, v1));
            branch = tape.relu(bn1);
            let w2 = next();
            let b2 = next();
            branch = tape.conv2d(branch, w2, b2, unit.conv2.stride, unit.conv2.padding)?;
            let g2 = next();
            let be2 = next();
            let (bn2, m2, v2) = tape.batch_norm_train(branch, g2, be2, eps)?;
            bn_updates.push((m2, v2));
            let shortcut = match &unit.shortcut {
                Shortcut::Identity => input,
                Shortcut::Projection(proj) => {
                    let pw = next();
                    let pb = next();
                    tape.conv2d(input, pw, pb, proj.stride, proj.padding)?
                }
            };
            let summed = tape.add(shortcut, bn2)?;
            h = tape.relu(summed);
        }

        let pooled = tape.global_avg_pool(h)?;
        let hw = next();
        let hb = next();
        let logits = tape.affine(pooled, hw, hb)?;
        let loss = tape.bce_with_logits(logits, targets)?;
        let loss_value = tape.value(loss).scalar_value().to_f64_lossy();

        let grads = tape.backward(loss)?;

        // Fold batch statistics into the running estimates.
        let mut bn_iter = bn_updates.into_iter();
        let momentum = S::from_f64_lossy(self.config.momentum);
        self.visit_bns_mut(|bn| {
            let (mean, var) = bn_iter.next().expect("one update per batch-norm");
            let keep = S::one() - momentum;
            for (slot, m) in bn.running_mean.data_mut().iter_mut().zip(mean.iter()) {
                *slot = keep * *slot + momentum * *m;
            }
            for (slot, v) in bn.running_var.data_mut().iter_mut().zip(var.iter()) {
                *slot = keep * *slot + momentum * *v;
            }
        });

        let mut idx = 0usize;
        let mut step_err: Option<TensorError> = None;
        self.visit_params_mut(|param| {
            if step_err.is_some() {
                return;
            }
            if let Some(grad) = grads.get(param_ids[idx]) {
                if let Err(e) = sgd_step(param, grad, lr, weight_decay) {
                    step_err = Some(e);
                }
            }
            idx += 1;
        });
        if let Some(e) = step_err {
            return Err(e.into());
        }
        Ok(loss_value)
    }
}

/// Train example borrowed from whatever corpus representation the caller has.
#[derive(Debug, Clone, Copy)]
pub struct TrainExample<'a, S> {
    pub image: &'a Tensor<S>,
    pub tags: &'a BTreeSet<String>,
}

/// Minimize mean per-tag binary cross-entropy on sigmoid outputs by SGD.
pub fn train_multilabel<S: Scalar>(
    net: &mut VisionNet<S>,
    dataset: &[TrainExample<'_, S>],
    config: &TrainConfig,
) -> Result<TrainReport, VisionError> {
    if dataset.is_empty() {
        return Err(VisionError::EmptyDataset);
    }
    let size = net.config.image_size;
    let channels = net.config.input_channels;
    for (index, ex) in dataset.iter().enumerate() {
        if ex.image.shape() != [channels, size, size] {
            return Err(VisionError::BadImageShape {
                index,
                shape: ex.image.shape().to_vec(),
                size,
            });
        }
        for tag in ex.tags.iter() {
            if net.vocabulary.index_of(tag).is_none() {
                return Err(VisionError::UnknownTag {
                    index,
                    tag: tag.clone(),
                });
            }
        }
    }

    let v = net.vocabulary.len();
    let wd = S::from_f64_lossy(config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let halvings = epoch.checked_div(config.halve_lr_every).unwrap_or(0) as i32;
        let lr = S::from_f64_lossy(config.learning_rate * 0.5f64.powi(halvings));
        shuffle(&mut order, &mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let flips: Vec<bool> = chunk
                .iter()
                .map(|_| config.horizontal_flip && rng.random::<bool>())
                .collect();
            let batch = stack_batch(net, dataset, chunk, &flips, v)?;
            let loss = net.train_batch(&batch.0, &batch.1, lr, wd)?;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(TrainReport { epoch_losses })
}

fn stack_batch<S: Scalar>(
    net: &VisionNet<S>,
    dataset: &[TrainExample<'_, S>],
    indices: &[usize],
    flips: &[bool],
    v: usize,
) -> Result<(Tensor<S>, Tensor<S>), VisionError> {
    let size = net.config.image_size;
    let channels = net.config.input_channels;
    let b = indices.len();
    let mut images = Vec::with_capacity(b * channels * size * size);
    let mut targets = vec![S::zero(); b * v];
    for (row, &i) in indices.iter().enumerate() {
        let data = dataset[i].image.data();
        if flips[row] {
            for c in 0..channels {
                for y in 0..size {
                    let base = (c * size + y) * size;
                    images.extend(data[base..base + size].iter().rev());
                }
            }
        } else {
            images.extend_from_slice(data);
        }
        for tag in dataset[i].tags.iter() {
            if let Some(col) = net.vocabulary.index_of(tag) {
                targets[row * v + col] = S::one();
            }
        }
    }
    Ok((
        Tensor::new(&[b, channels, size, size], images)?,
        Tensor::new(&[b, v], targets)?,
    ))
}

/// Fisher-Yates with the given RNG.
fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Mean per-tag AUC over tags that have both classes present, using
/// average-rank handling for ties.
pub fn mean_tag_auc<S: Scalar>(
    net: &VisionNet<S>,
    dataset: &[TrainExample<'_, S>],
) -> Result<f64, VisionError> {
    if dataset.is_empty() {
        return Err(VisionError::EmptyDataset);
    }
    let v = net.vocabulary.len();
    let mut scores = vec![Vec::with_capacity(dataset.len()); v];
    let mut labels = vec![Vec::with_capacity(dataset.len()); v];
    for ex in dataset {
        let det = net.detect_concepts(ex.image)?;
        for (t, &s) in det.scores.iter().enumerate() {
            scores[t].push(s);
            labels[t].push(ex.tags.contains(&net.vocabulary.tags()[t]));
        }
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for t in 0..v {
        if let Some(auc) = rank_auc(&scores[t], &labels[t]) {
            sum += auc;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(VisionError::EmptyDataset);
    }
    Ok(sum / counted as f64)
}

/// Mann-Whitney AUC with average ranks; `None` when a class is missing.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut indexed: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0usize;
    while i < indexed.len() {
        let mut j = i;
        while j + 1 < indexed.len() && indexed[j + 1].0 == indexed[i].0 {
            j += 1;
        }
        // Average rank for the tie group (1-based ranks).
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for item in indexed.iter().take(j + 1).skip(i) {
            if item.1 {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

const CHECKPOINT_KIND: &str = "vision-net";

#[derive(Serialize, Deserialize)]
struct VisionMeta {
    kind: String,
    version: u32,
    seed: u64,
    source: VocabSource,
    vocabulary: Vec<String>,
    config: NetConfig,
}

impl<S: Scalar> VisionNet<S> {
    pub fn save(&self, path: &Path) -> Result<(), VisionError> {
        let meta = VisionMeta {
            kind: CHECKPOINT_KIND.to_string(),
            version: 1,
            seed: self.seed,
            source: self.vocabulary.source,
            vocabulary: self.vocabulary.tags().to_vec(),
            config: self.config.clone(),
        };
        let mut ck = Checkpoint::new(
            serde_json::to_value(&meta).map_err(|e| VisionError::Metadata(e.to_string()))?,
        );
        ck.insert("stem.conv.w", self.stem_conv.weights.clone())?;
        ck.insert("stem.conv.b", self.stem_conv.bias.clone())?;
        insert_bn(&mut ck, "stem.bn", &self.stem_bn)?;
        for (i, unit) in self.units.iter().enumerate() {
            ck.insert(&format!("unit{i}.conv1.w"), unit.conv1.weights.clone())?;
            ck.insert(&format!("unit{i}.conv1.b"), unit.conv1.bias.clone())?;
            insert_bn(&mut ck, &format!("unit{i}.bn1"), &unit.bn1)?;
            ck.insert(&format!("unit{i}.conv2.w"), unit.conv2.weights.clone())?;
            ck.insert(&format!("unit{i}.conv2.b"), unit.conv2.bias.clone())?;
            insert_bn(&mut ck, &format!("unit{i}.bn2"), &unit.bn2)?;
            if let Shortcut::Projection(proj) = &unit.shortcut {
                ck.insert(&format!("unit{i}.shortcut.w"), proj.weights.clone())?;
                ck.insert(&format!("unit{i}.shortcut.b"), proj.bias.clone())?;
            }
        }
        ck.insert("head.w", self.head_weights.clone())?;
        ck.insert("head.b", self.head_bias.clone())?;
        ck.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VisionError> {
        let ck = Checkpoint::<S>::load(path)?;
        let meta: VisionMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| VisionError::Metadata(e.to_string()))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(VisionError::Metadata(format!(
                "expected kind {CHECKPOINT_KIND:?}, found {:?}",
                meta.kind
            )));
        }
        let vocabulary = TagVocabulary::new(meta.vocabulary, meta.source)?;
        let config = meta.config;
        let eps = S::from_f64_lossy(config.epsilon);
        let momentum = S::from_f64_lossy(config.momentum);

        let stem_conv = ConvParams::new(
            ck.get("stem.conv.w")?.clone(),
            ck.get("stem.conv.b")?.clone(),
            config.stem_stride,
            config.stem_padding,
        )?;
        let stem_bn = load_bn(&ck, "stem.bn", eps, momentum)?;
        let mut units = Vec::with_capacity(config.units.len());
        for (i, uc) in config.units.iter().enumerate() {
            let conv1 = ConvParams::new(
                ck.get(&format!("unit{i}.conv1.w"))?.clone(),
                ck.get(&format!("unit{i}.conv1.b"))?.clone(),
                uc.stride,
                1,
            )?;
            let bn1 = load_bn(&ck, &format!("unit{i}.bn1"), eps, momentum)?;
            let conv2 = ConvParams::new(
                ck.get(&format!("unit{i}.conv2.w"))?.clone(),
                ck.get(&format!("unit{i}.conv2.b"))?.clone(),
                1,
                1,
            )?;
            let bn2 = load_bn(&ck, &format!("unit{i}.bn2"), eps, momentum)?;
            let shortcut = if uc.in_channels == uc.out_channels && uc.stride == 1 {
                Shortcut::Identity
            } else {
                Shortcut::Projection(ConvParams::new(
                    ck.get(&format!("unit{i}.shortcut.w"))?.clone(),
                    ck.get(&format!("unit{i}.shortcut.b"))?.clone(),
                    uc.stride,
                    0,
                )?)
            };
            let unit = ResidualUnit { conv1, bn1, conv2, bn2, shortcut };
            unit.validate(uc.in_channels)?;
            units.push(unit);
        }
        Ok(Self {
            config,
            stem_conv,
            stem_bn,
            units,
            head_weights: ck.get("head.w")?.clone(),
            head_bias: ck.get("head.b")?.clone(),
            vocabulary,
            seed: meta.seed,
        })
    }
}

fn insert_bn<S: Scalar>(
    ck: &mut Checkpoint<S>,
    prefix: &str,
    bn: &BatchNormParams<S>,
) -> Result<(), FormatError> {
    ck.insert(&format!("{prefix}.gamma"), bn.gamma.clone())?;
    ck.insert(&format!("{prefix}.beta"), bn.beta.clone())?;
    ck.insert(&format!("{prefix}.running_mean"), bn.running_mean.clone())?;
    ck.insert(&format!("{prefix}.running_var"), bn.running_var.clone())?;
    Ok(())
}

fn load_bn<S: Scalar>(
    ck: &Checkpoint<S>,
    prefix: &str,
    epsilon: S,
    momentum: S,
) -> Result<BatchNormParams<S>, VisionError> {
    let params = BatchNormParams {
        gamma: ck.get(&format!("{prefix}.gamma"))?.clone(),
        beta: ck.get(&format!("{prefix}.beta"))?.clone(),
        running_mean: ck.get(&format!("{prefix}.running_mean"))?.clone(),
        running_var: ck.get(&format!("{prefix}.running_var"))?.clone(),
        epsilon,
        momentum,
    };
    params.validate()?;
    Ok(params)
}
