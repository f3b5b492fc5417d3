//! Logistic-regression confidence model over DMSM embeddings plus caption
//! statistics; scores each final caption in (0, 1).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmsm::DmsmEmbedding;
use crate::scalar::Scalar;
use crate::tensor::io::{read_tensor, write_tensor, FormatError};
use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("caption is empty")]
    EmptyCaption,
    #[error("training data contains a single class after binarization")]
    SingleClass,
    #[error("training data is empty")]
    EmptyData,
    #[error("feature dimension {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("feature vectors disagree in dimension: {lhs} vs {rhs}")]
    InconsistentFeatures { lhs: usize, rhs: usize },
    #[error("model file is malformed: {0}")]
    BadFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Four-level human quality taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityLabel {
    Excellent,
    Good,
    Bad,
    Embarrassing,
}

impl QualityLabel {
    /// Binarization: {excellent, good} -> positive, {bad, embarrassing} -> negative.
    pub fn is_positive(self) -> bool {
        matches!(self, QualityLabel::Excellent | QualityLabel::Good)
    }

    pub const ALL: [QualityLabel; 4] = [
        QualityLabel::Excellent,
        QualityLabel::Good,
        QualityLabel::Bad,
        QualityLabel::Embarrassing,
    ];
}

/// The confidence feature vector: both DMSM vectors plus five scalars,
/// 2D + 5 dimensions in total.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceFeatures<S> {
    pub dmsm_vision: Vec<S>,
    pub dmsm_caption: Vec<S>,
    pub lm_score: S,
    pub caption_length: usize,
    pub lm_score_per_word: S,
    pub log_tag_coverage: S,
    pub dmsm_score: S,
}

impl<S: Scalar> ConfidenceFeatures<S> {
    pub fn dim(&self) -> usize {
        self.dmsm_vision.len() + self.dmsm_caption.len() + 5
    }

    pub fn to_vec(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(&self.dmsm_vision);
        out.extend_from_slice(&self.dmsm_caption);
        out.push(self.lm_score);
        out.push(S::from_f64_lossy(self.caption_length as f64));
        out.push(self.lm_score_per_word);
        out.push(self.log_tag_coverage);
        out.push(self.dmsm_score);
        out
    }
}

/// Build the feature vector for one caption. `caption_words` is the final
/// caption; `lm_score` and `covered_tags` come from the candidate that
/// produced it.
pub fn assemble_features<S: Scalar>(
    vision_embedding: &DmsmEmbedding<S>,
    caption_embedding: &DmsmEmbedding<S>,
    lm_score: S,
    caption_words: &[String],
    covered_tags: usize,
    dmsm_score: S,
) -> Result<ConfidenceFeatures<S>, ConfidenceError> {
    if caption_words.is_empty() {
        return Err(ConfidenceError::EmptyCaption);
    }
    let length = caption_words.len();
    Ok(ConfidenceFeatures {
        dmsm_vision: vision_embedding.vector.clone(),
        dmsm_caption: caption_embedding.vector.clone(),
        lm_score,
        caption_length: length,
        lm_score_per_word: lm_score / S::from_f64_lossy(length as f64),
        log_tag_coverage: S::from_f64_lossy((1.0 + covered_tags as f64).ln()),
        dmsm_score,
    })
}

#[derive(Debug, Clone)]
pub struct ConfidenceModel<S> {
    pub weights: Tensor<S>,
    pub bias: S,
    pub means: Vec<S>,
    pub stds: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTrainConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub gradient_tolerance: f64,
}

impl ConfidenceTrainConfig {
    pub fn desk_default() -> Self {
        Self {
            l2: 1e-4,
            learning_rate: 1.0,
            max_iters: 2000,
            gradient_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceTrainReport {
    pub final_loss: f64,
    pub final_gradient_norm: f64,
    pub iterations: usize,
}

/// Mean L2-regularized logistic loss and its gradient for standardized rows.
/// The bias is not regularized.
pub fn logistic_loss_and_grad(
    rows: &[Vec<f64>],
    labels: &[bool],
    weights: &[f64],
    bias: f64,
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (row, &label) in rows.iter().zip(labels.iter()) {
        let z = row.iter().zip(weights.iter()).map(|(x, w)| x * w).sum::<f64>() + bias;
        let t = if label { 1.0 } else { 0.0 };
        // Stable log(1 + exp(-|z|)) + max(z, 0) - z t form.
        loss += z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
        let p = 1.0 / (1.0 + (-z).exp());
        let delta = p - t;
        for (g, x) in grad_w.iter_mut().zip(row.iter()) {
            *g += delta * x;
        }
        grad_b += delta;
    }
    loss /= n;
    grad_b /= n;
    for (g, w) in grad_w.iter_mut().zip(weights.iter()) {
        *g = *g / n + l2 * w;
    }
    loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    (loss, grad_w, grad_b)
}

/// Binarize labels, standardize features, and fit by gradient descent with a
/// backtracking step size until the gradient norm target or iteration cap.
pub fn train_confidence<S: Scalar>(
    examples: &[(ConfidenceFeatures<S>, QualityLabel)],
    config: &ConfidenceTrainConfig,
) -> Result<(ConfidenceModel<S>, ConfidenceTrainReport), ConfidenceError> {
    if examples.is_empty() {
        return Err(ConfidenceError::EmptyData);
    }
    let dim = examples[0].0.dim();
    for (f, _) in examples {
        if f.dim() != dim {
            return Err(ConfidenceError::InconsistentFeatures {
                lhs: dim,
                rhs: f.dim(),
            });
        }
    }
    let labels: Vec<bool> = examples.iter().map(|(_, l)| l.is_positive()).collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(ConfidenceError::SingleClass);
    }
    let raw: Vec<Vec<f64>> = examples
        .iter()
        .map(|(f, _)| f.to_vec().iter().map(|v| v.to_f64_lossy()).collect())
        .collect();

    let n = raw.len() as f64;
    let mut means = vec![0.0f64; dim];
    for row in &raw {
        for (m, x) in means.iter_mut().zip(row.iter()) {
            *m += x;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut stds = vec![0.0f64; dim];
    for row in &raw {
        for ((s, x), m) in stds.iter_mut().zip(row.iter()).zip(means.iter()) {
            *s += (x - m) * (x - m);
        }
    }
    for s in &mut stds {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0; // constant feature: pin to unit scale
        }
    }
    let rows: Vec<Vec<f64>> = raw
        .iter()
        .map(|row| {
            row.iter()
                .zip(means.iter().zip(stds.iter()))
                .map(|(x, (m, s))| (x - m) / s)
                .collect()
        })
        .collect();

    let mut weights = vec![0.0f64; dim];
    let mut bias = 0.0f64;
    let mut lr = config.learning_rate;
    let (mut loss, mut grad_w, mut grad_b) =
        logistic_loss_and_grad(&rows, &labels, &weights, bias, config.l2);
    let mut iterations = 0usize;
    let mut grad_norm = gradient_norm(&grad_w, grad_b);

    while grad_norm > config.gradient_tolerance && iterations < config.max_iters {
        iterations += 1;
        let mut stepped = false;
        while lr > 1e-15 {
            let cand_w: Vec<f64> = weights
                .iter()
                .zip(grad_w.iter())
                .map(|(w, g)| w - lr * g)
                .collect();
            let cand_b = bias - lr * grad_b;
            let (cand_loss, cand_gw, cand_gb) =
                logistic_loss_and_grad(&rows, &labels, &cand_w, cand_b, config.l2);
            if cand_loss <= loss {
                weights = cand_w;
                bias = cand_b;
                loss = cand_loss;
                grad_w = cand_gw;
                grad_b = cand_gb;
                lr *= 1.1;
                stepped = true;
                break;
            }
            lr *= 0.5;
        }
        if !stepped {
            break;
        }
        grad_norm = gradient_norm(&grad_w, grad_b);
    }

    let model = ConfidenceModel {
        weights: Tensor::new(&[dim], weights.iter().map(|&w| S::from_f64_lossy(w)).collect())?,
        bias: S::from_f64_lossy(bias),
        means: means.into_iter().map(S::from_f64_lossy).collect(),
        stds: stds.into_iter().map(S::from_f64_lossy).collect(),
    };
    Ok((
        model,
        ConfidenceTrainReport {
            final_loss: loss,
            final_gradient_norm: grad_norm,
            iterations,
        },
    ))
}

fn gradient_norm(grad_w: &[f64], grad_b: f64) -> f64 {
    (grad_w.iter().map(|g| g * g).sum::<f64>() + grad_b * grad_b).sqrt()
}

/// Sigmoid of the standardized-feature dot product plus bias.
pub fn confidence_score<S: Scalar>(
    model: &ConfidenceModel<S>,
    features: &ConfidenceFeatures<S>,
) -> Result<S, ConfidenceError> {
    let x = features.to_vec();
    if x.len() != model.weights.numel() {
        return Err(ConfidenceError::DimensionMismatch {
            expected: model.weights.numel(),
            got: x.len(),
        });
    }
    let mut z = model.bias;
    for ((x, w), (m, s)) in x
        .iter()
        .zip(model.weights.data().iter())
        .zip(model.means.iter().zip(model.stds.iter()))
    {
        z += *w * (*x - *m) / *s;
    }
    Ok(sigmoid_scalar(z))
}

const CONFIDENCE_KIND: &str = "confidence";

#[derive(Serialize, Deserialize)]
struct ConfidenceMeta {
    kind: String,
    version: u32,
    dim: usize,
    bias: f64,
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl<S: Scalar> ConfidenceModel<S> {
    pub fn save(&self, path: &Path) -> Result<(), ConfidenceError> {
        let meta = ConfidenceMeta {
            kind: CONFIDENCE_KIND.to_string(),
            version: 1,
            dim: self.weights.numel(),
            bias: self.bias.to_f64_lossy(),
            means: self.means.iter().map(|v| v.to_f64_lossy()).collect(),
            stds: self.stds.iter().map(|v| v.to_f64_lossy()).collect(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| ConfidenceError::BadFile(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        write_tensor(&mut w, &self.weights)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfidenceError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let meta: ConfidenceMeta =
            serde_json::from_slice(&json).map_err(|e| ConfidenceError::BadFile(e.to_string()))?;
        if meta.kind != CONFIDENCE_KIND {
            return Err(ConfidenceError::BadFile(format!(
                "expected kind {CONFIDENCE_KIND:?}, got {:?}",
                meta.kind
            )));
        }
        let weights: Tensor<S> = read_tensor(&mut r)?;
        if weights.numel() != meta.dim || meta.means.len() != meta.dim || meta.stds.len() != meta.dim
        {
            return Err(ConfidenceError::BadFile(format!(
                "dimension mismatch: header {} vs weights {}",
                meta.dim,
                weights.numel()
            )));
        }
        Ok(Self {
            weights,
            bias: S::from_f64_lossy(meta.bias),
            means: meta.means.into_iter().map(S::from_f64_lossy).collect(),
            stds: meta.stds.into_iter().map(S::from_f64_lossy).collect(),
        })
    }
}
