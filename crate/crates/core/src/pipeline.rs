//! End-to-end orchestration: vision -> tags -> candidate generation -> DMSM
//! rerank -> entity enrichment -> confidence, with per-stage wall times.
//! Also home to the training glue that the CLI subcommands call.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{
    assemble_features, confidence_score, train_confidence, ConfidenceError, ConfidenceModel,
    ConfidenceTrainConfig, QualityLabel,
};
use crate::dmsm::{
    rank_candidates, train_dmsm, DmsmError, DmsmModel, DmsmTrainConfig, DmsmTrainReport,
};
use crate::entity::{enrich_caption, recognize, EntityError, EntityGallery, EntityMatch};
use crate::lm::{beam_search, train_lm, LanguageModel, LmConfig, LmError, LmTrainReport};
use crate::synth::{self, LabeledExample, SynthError};
use crate::tensor::Tensor;
use crate::vision::{
    build_network, dual_detector, train_multilabel, NetConfig, TagVocabulary, TrainConfig,
    TrainExample, TrainReport, VisionError, VisionNet, VocabSource,
};
use crate::F;

pub const STAGES: [&str; 5] = ["vision", "language_model", "dmsm", "entity", "confidence"];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Paths, thresholds, and decode settings for an assembled pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub vision_a: PathBuf,
    pub vision_b: PathBuf,
    pub lm: PathBuf,
    pub dmsm: PathBuf,
    pub confidence: PathBuf,
    pub gallery: PathBuf,
    pub tag_threshold: f64,
    pub beam_width: usize,
    pub candidate_count: usize,
    pub max_caption_len: usize,
    pub entity_threshold: f64,
    pub confidence_fallback_threshold: f64,
    /// Shared DMSM embedding dimension (D).
    pub embedding_dim: usize,
    /// Desk-scale end-to-end latency target for `bench`.
    pub latency_budget_ms: f64,
    /// Service body limit in bytes.
    pub max_body_bytes: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            vision_a: "models/vision_coco.ckpt".into(),
            vision_b: "models/vision_web.ckpt".into(),
            lm: "models/lm.bin".into(),
            dmsm: "models/dmsm.ckpt".into(),
            confidence: "models/confidence.bin".into(),
            gallery: "models/gallery.json".into(),
            tag_threshold: 0.5,
            beam_width: 16,
            candidate_count: 12,
            max_caption_len: 16,
            entity_threshold: 0.8,
            confidence_fallback_threshold: 0.25,
            embedding_dim: 1000,
            latency_budget_ms: 50.0,
            max_body_bytes: 8 * 1024 * 1024,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("cannot parse {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [
            ("tag_threshold", self.tag_threshold),
            ("entity_threshold", self.entity_threshold),
            (
                "confidence_fallback_threshold",
                self.confidence_fallback_threshold,
            ),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PipelineError::Config(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.beam_width == 0 {
            return Err(PipelineError::Config("beam_width must be >= 1".into()));
        }
        if self.candidate_count == 0 || self.max_caption_len == 0 {
            return Err(PipelineError::Config(
                "candidate_count and max_caption_len must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagScore {
    pub tag: String,
    pub score: f64,
}

/// Everything the pipeline reports for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub caption: String,
    pub confidence: f64,
    pub tags: Vec<TagScore>,
    pub entities: Vec<EntityMatch>,
    pub candidates_considered: usize,
    pub stage_latencies: BTreeMap<String, f64>,
    pub low_confidence_fallback_used: bool,
}

impl CaptionResult {
    /// Equality modulo the wall-time map.
    pub fn same_output(&self, other: &Self) -> bool {
        self.caption == other.caption
            && self.confidence == other.confidence
            && self.tags == other.tags
            && self.entities == other.entities
            && self.candidates_considered == other.candidates_considered
            && self.low_confidence_fallback_used == other.low_confidence_fallback_used
    }
}

/// Frozen models behind a single caption call. Read-only after load, safe to
/// share across threads.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub vision_a: VisionNet<F>,
    pub vision_b: VisionNet<F>,
    pub lm: LanguageModel<F>,
    pub dmsm: DmsmModel<F>,
    pub confidence: ConfidenceModel<F>,
    pub gallery: EntityGallery<F>,
}

impl Pipeline {
    pub fn load(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let vision_a = VisionNet::load(&config.vision_a).map_err(stage_err("vision"))?;
        let vision_b = VisionNet::load(&config.vision_b).map_err(stage_err("vision"))?;
        let lm = LanguageModel::load(&config.lm).map_err(stage_err("language_model"))?;
        let dmsm = DmsmModel::load(&config.dmsm).map_err(stage_err("dmsm"))?;
        let confidence = ConfidenceModel::load(&config.confidence).map_err(stage_err("confidence"))?;
        let gallery = EntityGallery::load(&config.gallery).map_err(stage_err("entity"))?;
        Self::from_parts(config, vision_a, vision_b, lm, dmsm, confidence, gallery)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: PipelineConfig,
        vision_a: VisionNet<F>,
        vision_b: VisionNet<F>,
        lm: LanguageModel<F>,
        dmsm: DmsmModel<F>,
        confidence: ConfidenceModel<F>,
        gallery: EntityGallery<F>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        if dmsm.dim() != config.embedding_dim {
            return Err(PipelineError::Config(format!(
                "dmsm model dimension {} does not match configured embedding_dim {}",
                dmsm.dim(),
                config.embedding_dim
            )));
        }
        Ok(Self {
            config,
            vision_a,
            vision_b,
            lm,
            dmsm,
            confidence,
            gallery,
        })
    }

    /// Model identifiers for the health endpoint.
    pub fn health(&self) -> serde_json::Value {
        serde_json::json!({
            "status": "ok",
            "models": {
                "vision_a": format!("vision-net seed={} tags={}", self.vision_a.seed, self.vision_a.vocabulary.len()),
                "vision_b": format!("vision-net seed={} tags={}", self.vision_b.seed, self.vision_b.vocabulary.len()),
                "lm": format!("caption-lm n={} vocab={}", self.lm.history_len(), self.lm.vocabulary().len()),
                "dmsm": format!("dmsm dim={} gamma={}", self.dmsm.dim(), self.dmsm.gamma),
                "confidence": format!("confidence dim={}", self.confidence.weights.numel()),
                "gallery": format!("gallery entries={}", self.gallery.len()),
            }
        })
    }

    /// Run the five stages over one `3 x H x W` image in [0, 1].
    pub fn caption_image(&self, image: &Tensor<F>) -> Result<CaptionResult, PipelineError> {
        let mut latencies = BTreeMap::new();

        // Vision: both detectors, merged by max score per tag.
        let t = Instant::now();
        let pooled = self
            .vision_a
            .pooled_features(image)
            .map_err(stage_err("vision"))?;
        let det_a = self
            .vision_a
            .detect_from_pooled(&pooled)
            .map_err(stage_err("vision"))?;
        let det_b = self
            .vision_b
            .detect_concepts(image)
            .map_err(stage_err("vision"))?;
        let merged = dual_detector(&det_a, &det_b);
        let tags_scored = merged.above_threshold(self.config.tag_threshold);
        let tag_set: std::collections::BTreeSet<String> =
            tags_scored.iter().map(|(t, _)| t.clone()).collect();
        latencies.insert("vision".to_string(), ms_since(t));

        // Candidate generation conditioned on the detected tags.
        let t = Instant::now();
        let raw_candidates = beam_search(
            &self.lm,
            &tag_set,
            self.config.beam_width,
            self.config.max_caption_len,
        )
        .map_err(stage_err("language_model"))?;
        // Prefer candidates that generated the end marker; fall back to
        // length-truncated ones only when nothing finished.
        let (finished, truncated): (Vec<_>, Vec<_>) = raw_candidates
            .into_iter()
            .filter(|c| !c.words.is_empty())
            .partition(|c| c.ended);
        let pool = if finished.is_empty() { truncated } else { finished };
        let candidates: Vec<_> = pool
            .into_iter()
            .take(self.config.candidate_count)
            .collect();
        if candidates.is_empty() {
            return Err(PipelineError::Stage {
                stage: "language_model",
                message: "beam search produced no non-empty candidates".into(),
            });
        }
        let candidates_considered = candidates.len();
        latencies.insert("language_model".to_string(), ms_since(t));

        // Semantic rerank.
        let t = Instant::now();
        let ranked = rank_candidates(&self.dmsm, &pooled, &candidates).map_err(stage_err("dmsm"))?;
        let top = &ranked[0];
        latencies.insert("dmsm".to_string(), ms_since(t));

        // Entity recognition and caption rewrite.
        let t = Instant::now();
        let matches = match synth::glyph_probe(image) {
            Some(probe) => recognize(&self.gallery, &probe, self.config.entity_threshold)
                .map_err(stage_err("entity"))?,
            None => Vec::new(),
        };
        let final_words = enrich_caption(&top.candidate.words, &matches, &self.gallery);
        let entities: Vec<EntityMatch> = matches.into_iter().filter(|m| m.matched).collect();
        latencies.insert("entity".to_string(), ms_since(t));

        // Confidence over the final caption.
        let t = Instant::now();
        let features = assemble_features(
            &top.image_embedding,
            &top.caption_embedding,
            top.candidate.lm_score,
            &final_words,
            top.candidate.covered_tags.len(),
            top.score,
        )
        .map_err(stage_err("confidence"))?;
        let score = confidence_score(&self.confidence, &features).map_err(stage_err("confidence"))?;
        let fallback = score < self.config.confidence_fallback_threshold;
        let caption = if fallback {
            format!("maybe {}", final_words.join(" "))
        } else {
            final_words.join(" ")
        };
        latencies.insert("confidence".to_string(), ms_since(t));

        Ok(CaptionResult {
            caption,
            confidence: score,
            tags: tags_scored
                .into_iter()
                .map(|(tag, score)| TagScore { tag, score })
                .collect(),
            entities,
            candidates_considered,
            stage_latencies: latencies,
            low_confidence_fallback_used: fallback,
        })
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Tag vocabulary of the first (coco-style) detector: colors and shapes.
pub fn coco_vocabulary() -> TagVocabulary {
    let tags = synth::COLORS
        .iter()
        .chain(synth::SHAPES.iter())
        .map(|s| s.to_string())
        .collect();
    TagVocabulary::new(tags, VocabSource::CocoStyle).expect("static vocabulary is valid")
}

/// Tag vocabulary of the second (web-style) detector: shapes plus "photo",
/// overlapping the first on the shape tags.
pub fn web_vocabulary() -> TagVocabulary {
    let tags = synth::SHAPES
        .iter()
        .map(|s| s.to_string())
        .chain(std::iter::once(synth::PHOTO_TAG.to_string()))
        .collect();
    TagVocabulary::new(tags, VocabSource::WebStyle).expect("static vocabulary is valid")
}

fn filtered_tags(example: &LabeledExample<F>, vocab: &TagVocabulary) -> std::collections::BTreeSet<String> {
    example
        .tags
        .iter()
        .filter(|t| vocab.index_of(t).is_some())
        .cloned()
        .collect()
}

/// Train one detector on the corpus restricted to its vocabulary.
pub fn train_detector(
    corpus: &[LabeledExample<F>],
    net_config: &NetConfig,
    vocabulary: TagVocabulary,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<(VisionNet<F>, TrainReport), VisionError> {
    let mut net = build_network(net_config, vocabulary, seed)?;
    let tag_sets: Vec<_> = corpus
        .iter()
        .map(|ex| filtered_tags(ex, &net.vocabulary))
        .collect();
    let dataset: Vec<TrainExample<'_, F>> = corpus
        .iter()
        .zip(tag_sets.iter())
        .map(|(ex, tags)| TrainExample {
            image: &ex.image,
            tags,
        })
        .collect();
    let report = train_multilabel(&mut net, &dataset, train_config)?;
    Ok((net, report))
}

/// Train the language model on the corpus captions and tag sets.
pub fn train_language_model(
    corpus: &[LabeledExample<F>],
    config: &LmConfig,
) -> Result<(LanguageModel<F>, LmTrainReport), LmError> {
    let data: Vec<(Vec<String>, std::collections::BTreeSet<String>)> = corpus
        .iter()
        .map(|ex| {
            (
                ex.caption.split_whitespace().map(|w| w.to_string()).collect(),
                ex.tags.clone(),
            )
        })
        .collect();
    train_lm(&data, config)
}

/// Pooled pre-sigmoid channel vectors from the first detector, one per
/// corpus image.
pub fn extract_vision_features(
    net: &VisionNet<F>,
    corpus: &[LabeledExample<F>],
) -> Result<Vec<Vec<F>>, VisionError> {
    corpus.iter().map(|ex| net.pooled_features(&ex.image)).collect()
}

/// Train the DMSM ranker on (pooled features, caption) pairs.
pub fn train_ranker(
    features: &[Vec<F>],
    corpus: &[LabeledExample<F>],
    config: &DmsmTrainConfig,
) -> Result<(DmsmModel<F>, DmsmTrainReport), DmsmError> {
    let pairs: Vec<(Vec<F>, Vec<String>)> = features
        .iter()
        .zip(corpus.iter())
        .map(|(f, ex)| {
            (
                f.clone(),
                ex.caption.split_whitespace().map(|w| w.to_string()).collect(),
            )
        })
        .collect();
    train_dmsm(&pairs, config)
}

#[derive(Debug, Error)]
pub enum ConfidenceDataError {
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Dmsm(#[from] DmsmError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Entity(#[from] EntityError),
}

/// Synthetic confidence training set: the generator's caption is a positive,
/// a corrupted caption a negative; features come from the trained models.
pub fn train_confidence_model(
    features: &[Vec<F>],
    corpus: &[LabeledExample<F>],
    lm: &LanguageModel<F>,
    dmsm: &DmsmModel<F>,
    config: &ConfidenceTrainConfig,
    max_examples: usize,
    seed: u64,
) -> Result<(ConfidenceModel<F>, crate::confidence::ConfidenceTrainReport), ConfidenceDataError> {
    let mut examples = Vec::new();
    for (i, (pooled, ex)) in features.iter().zip(corpus.iter()).enumerate() {
        if i >= max_examples {
            break;
        }
        let image_embedding = dmsm.embed_image(pooled)?;
        let true_words: Vec<String> = ex.caption.split_whitespace().map(|w| w.to_string()).collect();
        let corrupted_caption = synth::corrupt_caption(&ex.caption, seed.wrapping_add(i as u64))?;
        let corrupted_words: Vec<String> = corrupted_caption
            .split_whitespace()
            .map(|w| w.to_string())
            .collect();
        for (words, label) in [
            (&true_words, QualityLabel::Excellent),
            (&corrupted_words, QualityLabel::Bad),
        ] {
            let caption_embedding = dmsm.embed_caption(words)?;
            let (lm_score, covered) = lm.score_sequence(words, &ex.tags)?;
            let score = crate::dmsm::dmsm_score(&image_embedding, &caption_embedding)?;
            examples.push((
                assemble_features(
                    &image_embedding,
                    &caption_embedding,
                    lm_score,
                    words,
                    covered.len(),
                    score,
                )?,
                label,
            ));
        }
    }
    Ok(train_confidence(&examples, config)?)
}
