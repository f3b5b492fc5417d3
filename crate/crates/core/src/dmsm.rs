//! Deep multimodal semantic model: two affine-tanh-affine towers map pooled
//! vision features and letter-trigram caption features into a shared
//! D-dimensional unit sphere scored by cosine similarity. Training minimizes
//! a softmax ranking loss of each positive caption against in-batch
//! negatives.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::CaptionCandidate;
use crate::scalar::Scalar;
use crate::tensor::io::{Checkpoint, FormatError};
use crate::tensor::ops::{affine, l2_normalize_rows, tanh};
use crate::tensor::sgd::sgd_step;
use crate::tensor::tape::Tape;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DmsmError {
    #[error("training corpus needs at least {needed} distinct captions for {negatives} negatives, found {found}")]
    NotEnoughCaptions {
        needed: usize,
        negatives: usize,
        found: usize,
    },
    #[error("caption is empty")]
    EmptyCaption,
    #[error("caption {0:?} has no in-inventory trigrams")]
    OutOfInventory(String),
    #[error("vision feature dimension {got} does not match tower input {expected}")]
    FeatureDimension { expected: usize, got: usize },
    #[error("embedding dimensions differ: {lhs} vs {rhs}")]
    EmbeddingDimension { lhs: usize, rhs: usize },
    #[error("pre-normalization embedding collapsed to zero")]
    DegenerateEmbedding,
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("checkpoint metadata error: {0}")]
    Metadata(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Caption,
}

/// Unit-norm embedding in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct DmsmEmbedding<S> {
    pub vector: Vec<S>,
    pub modality: Modality,
}

impl<S: Scalar> DmsmEmbedding<S> {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector
            .iter()
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Letter-trigram inventory fixed at training time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrigramInventory {
    trigrams: Vec<String>,
    index: HashMap<String, usize>,
}

impl TrigramInventory {
    /// Collect every boundary-marked trigram of the given captions, sorted.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for caption in captions {
            for word in caption.split_whitespace() {
                collect_trigrams(word, |t| {
                    set.insert(t);
                });
            }
        }
        Self::from_sorted(set.into_iter().collect())
    }

    fn from_sorted(trigrams: Vec<String>) -> Self {
        let index = trigrams
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { trigrams, index }
    }

    pub fn len(&self) -> usize {
        self.trigrams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trigrams.is_empty()
    }

    pub fn trigrams(&self) -> &[String] {
        &self.trigrams
    }

    /// Dense trigram count vector; unseen trigrams are dropped.
    pub fn featurize<S: Scalar>(&self, words: &[String]) -> Result<Vec<S>, DmsmError> {
        if words.is_empty() {
            return Err(DmsmError::EmptyCaption);
        }
        let mut counts = vec![S::zero(); self.trigrams.len()];
        let mut any = false;
        for word in words {
            collect_trigrams(&word.to_lowercase(), |t| {
                if let Some(&i) = self.index.get(&t) {
                    counts[i] += S::one();
                    any = true;
                }
            });
        }
        if !any {
            return Err(DmsmError::OutOfInventory(words.join(" ")));
        }
        Ok(counts)
    }
}

/// Boundary-marked letter trigrams of a single word: "cat" -> #ca cat at#.
pub fn collect_trigrams(word: &str, mut f: impl FnMut(String)) {
    let chars: Vec<char> = std::iter::once('#')
        .chain(word.chars())
        .chain(std::iter::once('#'))
        .collect();
    for window in chars.windows(3) {
        f(window.iter().collect());
    }
}

/// One affine-tanh-affine tower.
#[derive(Debug, Clone)]
pub struct Tower<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> Tower<S> {
    fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Result<Self, TensorError> {
        Ok(Self {
            w1: Tensor::randn(&[input, hidden], (1.0 / input as f64).sqrt(), rng)?,
            b1: Tensor::zeros(&[hidden])?,
            w2: Tensor::randn(&[hidden, output], (1.0 / hidden as f64).sqrt(), rng)?,
            b2: Tensor::zeros(&[output])?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Pre-normalization forward pass over rows.
    pub fn forward(&self, rows: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let h = tanh(&affine(rows, &self.w1, &self.b1)?);
        affine(&h, &self.w2, &self.b2)
    }
}

#[derive(Debug, Clone)]
pub struct DmsmModel<S> {
    pub image_tower: Tower<S>,
    pub caption_tower: Tower<S>,
    pub inventory: TrigramInventory,
    pub gamma: f64,
    pub seed: u64,
}

impl<S: Scalar> DmsmModel<S> {
    pub fn dim(&self) -> usize {
        self.image_tower.output_dim()
    }

    /// Map pooled vision features onto the unit sphere.
    pub fn embed_image(&self, vision_features: &[S]) -> Result<DmsmEmbedding<S>, DmsmError> {
        if vision_features.len() != self.image_tower.input_dim() {
            return Err(DmsmError::FeatureDimension {
                expected: self.image_tower.input_dim(),
                got: vision_features.len(),
            });
        }
        let rows = Tensor::new(&[1, vision_features.len()], vision_features.to_vec())?;
        let raw = self.image_tower.forward(&rows)?;
        let unit = l2_normalize_rows(&raw).map_err(|_| DmsmError::DegenerateEmbedding)?;
        Ok(DmsmEmbedding {
            vector: unit.into_data(),
            modality: Modality::Image,
        })
    }

    /// Tokenized caption to the unit sphere via letter trigram counts.
    pub fn embed_caption(&self, words: &[String]) -> Result<DmsmEmbedding<S>, DmsmError> {
        let features = self.inventory.featurize::<S>(words)?;
        let rows = Tensor::new(&[1, features.len()], features)?;
        let raw = self.caption_tower.forward(&rows)?;
        let unit = l2_normalize_rows(&raw).map_err(|_| DmsmError::DegenerateEmbedding)?;
        Ok(DmsmEmbedding {
            vector: unit.into_data(),
            modality: Modality::Caption,
        })
    }
}

/// Cosine similarity of two unit embeddings (a plain dot product).
pub fn dmsm_score<S: Scalar>(
    image: &DmsmEmbedding<S>,
    caption: &DmsmEmbedding<S>,
) -> Result<S, DmsmError> {
    if image.dim() != caption.dim() {
        return Err(DmsmError::EmbeddingDimension {
            lhs: image.dim(),
            rhs: caption.dim(),
        });
    }
    let mut dot = S::zero();
    for (a, b) in image.vector.iter().zip(caption.vector.iter()) {
        dot += *a * *b;
    }
    Ok(dot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmsmTrainConfig {
    /// Negatives per positive (R).
    pub negatives: usize,
    /// Softmax smoothing (gamma).
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    /// Shared embedding dimension (D).
    pub dim: usize,
    pub seed: u64,
}

impl DmsmTrainConfig {
    pub fn desk_default() -> Self {
        Self {
            negatives: 4,
            gamma: 10.0,
            epochs: 8,
            batch_size: 16,
            learning_rate: 0.05,
            weight_decay: 1e-5,
            hidden: 64,
            dim: 1000,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmsmTrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Train the two towers on (vision features, caption) positives against
/// uniformly sampled in-batch negative captions.
pub fn train_dmsm<S: Scalar>(
    pairs: &[(Vec<S>, Vec<String>)],
    config: &DmsmTrainConfig,
) -> Result<(DmsmModel<S>, DmsmTrainReport), DmsmError> {
    let distinct: std::collections::BTreeSet<String> =
        pairs.iter().map(|(_, c)| c.join(" ")).collect();
    if distinct.len() < config.negatives + 1 {
        return Err(DmsmError::NotEnoughCaptions {
            needed: config.negatives + 1,
            negatives: config.negatives,
            found: distinct.len(),
        });
    }
    let inventory = TrigramInventory::build(distinct.iter().map(|s| s.as_str()));
    let vision_dim = pairs[0].0.len();
    for (features, _) in pairs {
        if features.len() != vision_dim {
            return Err(DmsmError::FeatureDimension {
                expected: vision_dim,
                got: features.len(),
            });
        }
    }
    let caption_features: Vec<Vec<S>> = pairs
        .iter()
        .map(|(_, words)| inventory.featurize::<S>(words))
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = DmsmModel {
        image_tower: Tower::init(vision_dim, config.hidden, config.dim, &mut rng)?,
        caption_tower: Tower::init(inventory.len(), config.hidden, config.dim, &mut rng)?,
        inventory,
        gamma: config.gamma,
        seed: config.seed,
    };

    let group = config.negatives + 1;
    let lr = S::from_f64_lossy(config.learning_rate);
    let wd = S::from_f64_lossy(config.weight_decay);
    let gamma = S::from_f64_lossy(config.gamma);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let t_dim = model.inventory.len();

    for _ in 0..config.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(group)) {
            if chunk.len() < group {
                continue;
            }
            let b = chunk.len();
            let mut image_rows = Vec::with_capacity(b * vision_dim);
            let mut caption_rows = Vec::with_capacity(b * group * t_dim);
            for (slot, &i) in chunk.iter().enumerate() {
                image_rows.extend_from_slice(&pairs[i].0);
                caption_rows.extend_from_slice(&caption_features[i]);
                for _ in 0..config.negatives {
                    // Uniform over the other batch members.
                    let mut pick = rng.random_range(0..b - 1);
                    if pick >= slot {
                        pick += 1;
                    }
                    caption_rows.extend_from_slice(&caption_features[chunk[pick]]);
                }
            }
            let images = Tensor::new(&[b, vision_dim], image_rows)?;
            let captions = Tensor::new(&[b * group, t_dim], caption_rows)?;

            let mut tape = Tape::new();
            let iw1 = tape.leaf(model.image_tower.w1.clone());
            let ib1 = tape.leaf(model.image_tower.b1.clone());
            let iw2 = tape.leaf(model.image_tower.w2.clone());
            let ib2 = tape.leaf(model.image_tower.b2.clone());
            let cw1 = tape.leaf(model.caption_tower.w1.clone());
            let cb1 = tape.leaf(model.caption_tower.b1.clone());
            let cw2 = tape.leaf(model.caption_tower.w2.clone());
            let cb2 = tape.leaf(model.caption_tower.b2.clone());
            let x_img = tape.leaf(images);
            let x_cap = tape.leaf(captions);

            let ih = tape.affine(x_img, iw1, ib1)?;
            let ih = tape.tanh(ih);
            let ie = tape.affine(ih, iw2, ib2)?;
            let ie = tape.l2_normalize_rows(ie)?;
            let ch = tape.affine(x_cap, cw1, cb1)?;
            let ch = tape.tanh(ch);
            let ce = tape.affine(ch, cw2, cb2)?;
            let ce = tape.l2_normalize_rows(ce)?;
            let scores = tape.paired_dot(ie, ce, group)?;
            let scaled = tape.scale(scores, gamma);
            let loss = tape.rank_softmax_loss(scaled)?;
            total += tape.value(loss).scalar_value().to_f64_lossy();
            batches += 1;

            let grads = tape.backward(loss)?;
            for (param, id) in [
                (&mut model.image_tower.w1, iw1),
                (&mut model.image_tower.b1, ib1),
                (&mut model.image_tower.w2, iw2),
                (&mut model.image_tower.b2, ib2),
                (&mut model.caption_tower.w1, cw1),
                (&mut model.caption_tower.b1, cb1),
                (&mut model.caption_tower.w2, cw2),
                (&mut model.caption_tower.b2, cb2),
            ] {
                if let Some(g) = grads.get(id) {
                    sgd_step(param, g, lr, wd)?;
                }
            }
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok((model, DmsmTrainReport { epoch_losses }))
}

/// Caption candidate with its similarity score and the embeddings that
/// produced it (kept for the confidence features downstream).
#[derive(Debug, Clone)]
pub struct RankedCandidate<S> {
    pub candidate: CaptionCandidate<S>,
    pub score: S,
    pub image_embedding: DmsmEmbedding<S>,
    pub caption_embedding: DmsmEmbedding<S>,
}

/// Stable sort of candidates by cosine similarity, highest first.
pub fn rank_candidates<S: Scalar>(
    model: &DmsmModel<S>,
    vision_features: &[S],
    candidates: &[CaptionCandidate<S>],
) -> Result<Vec<RankedCandidate<S>>, DmsmError> {
    if candidates.is_empty() {
        return Err(DmsmError::NoCandidates);
    }
    let image_embedding = model.embed_image(vision_features)?;
    let mut ranked = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let caption_embedding = model.embed_caption(&candidate.words)?;
        let score = dmsm_score(&image_embedding, &caption_embedding)?;
        ranked.push(RankedCandidate {
            candidate: candidate.clone(),
            score,
            image_embedding: image_embedding.clone(),
            caption_embedding,
        });
    }
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(ranked)
}

/// Fraction of items whose true caption outranks `distractors` sampled
/// distinct captions; ties count as misses.
pub fn top1_retrieval<S: Scalar>(
    model: &DmsmModel<S>,
    items: &[(Vec<S>, Vec<String>)],
    distractors: usize,
    seed: u64,
) -> Result<f64, DmsmError> {
    if items.is_empty() {
        return Err(DmsmError::NoCandidates);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for (features, true_words) in items {
        let image = model.embed_image(features)?;
        let true_caption = true_words.join(" ");
        let true_score = dmsm_score(&image, &model.embed_caption(true_words)?)?;
        let mut best_other = f64::NEG_INFINITY;
        let mut drawn = 0usize;
        let mut guard = 0usize;
        while drawn < distractors && guard < 100 * distractors {
            guard += 1;
            let pick = rng.random_range(0..items.len());
            if items[pick].1.join(" ") == true_caption {
                continue;
            }
            let s = dmsm_score(&image, &model.embed_caption(&items[pick].1)?)?;
            best_other = best_other.max(s.to_f64_lossy());
            drawn += 1;
        }
        if true_score.to_f64_lossy() > best_other {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

const DMSM_KIND: &str = "dmsm";

#[derive(Serialize, Deserialize)]
struct DmsmMeta {
    kind: String,
    version: u32,
    gamma: f64,
    seed: u64,
    inventory: Vec<String>,
}

impl<S: Scalar> DmsmModel<S> {
    pub fn save(&self, path: &Path) -> Result<(), DmsmError> {
        let meta = DmsmMeta {
            kind: DMSM_KIND.to_string(),
            version: 1,
            gamma: self.gamma,
            seed: self.seed,
            inventory: self.inventory.trigrams().to_vec(),
        };
        let mut ck = Checkpoint::new(
            serde_json::to_value(&meta).map_err(|e| DmsmError::Metadata(e.to_string()))?,
        );
        for (name, t) in [
            ("image.w1", &self.image_tower.w1),
            ("image.b1", &self.image_tower.b1),
            ("image.w2", &self.image_tower.w2),
            ("image.b2", &self.image_tower.b2),
            ("caption.w1", &self.caption_tower.w1),
            ("caption.b1", &self.caption_tower.b1),
            ("caption.w2", &self.caption_tower.w2),
            ("caption.b2", &self.caption_tower.b2),
        ] {
            ck.insert(name, (*t).clone())?;
        }
        ck.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DmsmError> {
        let ck = Checkpoint::<S>::load(path)?;
        let meta: DmsmMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| DmsmError::Metadata(e.to_string()))?;
        if meta.kind != DMSM_KIND {
            return Err(DmsmError::Metadata(format!(
                "expected kind {DMSM_KIND:?}, found {:?}",
                meta.kind
            )));
        }
        Ok(Self {
            image_tower: Tower {
                w1: ck.get("image.w1")?.clone(),
                b1: ck.get("image.b1")?.clone(),
                w2: ck.get("image.w2")?.clone(),
                b2: ck.get("image.b2")?.clone(),
            },
            caption_tower: Tower {
                w1: ck.get("caption.w1")?.clone(),
                b1: ck.get("caption.b1")?.clone(),
                w2: ck.get("caption.w2")?.clone(),
                b2: ck.get("caption.b2")?.clone(),
            },
            inventory: TrigramInventory::from_sorted(meta.inventory),
            gamma: meta.gamma,
            seed: meta.seed,
        })
    }
}
