//! Tag-conditioned maximum-entropy language model and beam-search decoder.
//!
//! The model scores each candidate word with a linear sum of feature weights
//! and normalizes with a softmax over the whole vocabulary. Three feature
//! templates exist: (history n-gram suffix, word) for suffix lengths 0..=n,
//! a shared "word is a remaining tag" indicator, and a shared "end marker
//! while no tags remain" indicator.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::io::{read_tensor, write_tensor, FormatError};
use crate::tensor::{Tensor, TensorError};

pub const START: &str = "<s>";
pub const END: &str = "</s>";

/// Tokenized caption paired with its conditioning tag set.
pub type TaggedCaption = (Vec<String>, BTreeSet<String>);

#[derive(Debug, Error)]
pub enum LmError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("history word {0:?} is not in the vocabulary")]
    UnknownHistoryWord(String),
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("beam width must be >= 1")]
    BadBeamWidth,
    #[error("max length must be >= 1")]
    BadMaxLen,
    #[error("model file is malformed: {0}")]
    BadFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Hash, PartialEq, Eq)]
enum FeatureKey {
    /// (history suffix, candidate word), word ids into the vocabulary.
    Ngram { history: Vec<u32>, word: u32 },
    /// Candidate word is one of the still-uncovered conditioning tags.
    TagMember,
    /// Candidate word is the end marker and every tag has been covered.
    EndGate,
}

#[derive(Debug, Clone)]
pub struct LanguageModel<S> {
    vocabulary: Vec<String>,
    word_index: HashMap<String, u32>,
    n: usize,
    template_version: u32,
    feature_index: HashMap<FeatureKey, usize>,
    feature_keys: Vec<FeatureKey>,
    weights: Vec<S>,
}

/// Word sequence with its total log-probability and the conditioning tags it
/// has covered so far. `ended` records whether the end marker was generated
/// (its log-probability is then part of `lm_score`) or decoding stopped at
/// the length limit.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionCandidate<S> {
    pub words: Vec<String>,
    pub lm_score: S,
    pub covered_tags: BTreeSet<String>,
    pub ended: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    /// History length in previous words.
    pub n: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl LmConfig {
    pub fn desk_default() -> Self {
        Self {
            n: 3,
            epochs: 800,
            learning_rate: 1.0,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmTrainReport {
    /// Mean per-word log-likelihood per epoch, measured before each update.
    pub log_likelihood: Vec<f64>,
}

impl<S: Scalar> LanguageModel<S> {
    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn history_len(&self) -> usize {
        self.n
    }

    pub fn template_version(&self) -> u32 {
        self.template_version
    }

    fn word_id(&self, word: &str) -> Option<u32> {
        self.word_index.get(word).copied()
    }

    fn weight(&self, key: &FeatureKey) -> S {
        match self.feature_index.get(key) {
            Some(&i) => self.weights[i],
            None => S::zero(),
        }
    }

    /// Pad-or-truncate a history to exactly `n` ids, left-padded with starts.
    fn history_ids(&self, history: &[String]) -> Result<Vec<u32>, LmError> {
        for word in history {
            if self.word_id(word).is_none() {
                return Err(LmError::UnknownHistoryWord(word.clone()));
            }
        }
        let start = self.word_id(START).expect("vocabulary contains start");
        let mut ids = vec![start; self.n];
        let tail = history.len().saturating_sub(self.n);
        for (slot, word) in ids
            .iter_mut()
            .skip(self.n.saturating_sub(history.len().min(self.n)))
            .zip(history[tail..].iter())
        {
            *slot = self.word_id(word).expect("validated above");
        }
        Ok(ids)
    }

    fn remaining_mask(&self, remaining: &BTreeSet<String>) -> u64 {
        let mut mask = 0u64;
        for tag in remaining {
            if let Some(id) = self.word_id(tag) {
                mask |= 1u64 << id;
            }
        }
        mask
    }

    /// Linear feature scores for every vocabulary word in a given state.
    fn scores(&self, hist: &[u32], remaining_mask: u64, remaining_empty: bool) -> Vec<S> {
        let end = self.word_id(END).expect("vocabulary contains end");
        let tag_w = self.weight(&FeatureKey::TagMember);
        let end_w = self.weight(&FeatureKey::EndGate);
        (0..self.vocabulary.len() as u32)
            .map(|word| {
                let mut s = S::zero();
                for k in 0..=self.n {
                    s += self.weight(&FeatureKey::Ngram {
                        history: hist[self.n - k..].to_vec(),
                        word,
                    });
                }
                if word < 64 && remaining_mask & (1 << word) != 0 {
                    s += tag_w;
                }
                if word == end && remaining_empty {
                    s += end_w;
                }
                s
            })
            .collect()
    }

    /// Probability distribution over the vocabulary for the next word.
    pub fn next_word_distribution(
        &self,
        history: &[String],
        remaining_tags: &BTreeSet<String>,
    ) -> Result<Vec<S>, LmError> {
        let hist = self.history_ids(history)?;
        let mask = self.remaining_mask(remaining_tags);
        let scores = self.scores(&hist, mask, remaining_tags.is_empty());
        Ok(softmax(&scores))
    }

    /// Total log-probability of a word sequence (including the end-marker
    /// step) conditioned on a tag set; also returns the covered tags.
    pub fn score_sequence(
        &self,
        words: &[String],
        tags: &BTreeSet<String>,
    ) -> Result<(S, BTreeSet<String>), LmError> {
        let mut remaining: BTreeSet<String> = tags.clone();
        let mut covered = BTreeSet::new();
        let mut history: Vec<String> = Vec::new();
        let mut total = S::zero();
        let end = self.word_id(END).expect("vocabulary contains end");
        for step in 0..=words.len() {
            let dist = self.next_word_distribution(&history, &remaining)?;
            let target = if step == words.len() {
                end
            } else {
                self.word_id(&words[step])
                    .ok_or_else(|| LmError::UnknownWord(words[step].clone()))?
            };
            total += dist[target as usize].ln();
            if step < words.len() {
                let w = &words[step];
                if remaining.remove(&w.to_lowercase()) {
                    covered.insert(w.to_lowercase());
                }
                history.push(w.clone());
            }
        }
        Ok((total, covered))
    }
}

fn softmax<S: Scalar>(scores: &[S]) -> Vec<S> {
    let max = scores.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<S> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Maximize per-word conditional log-likelihood with L2 regularization by
/// full-batch gradient ascent.
pub fn train_lm<S: Scalar>(
    corpus: &[TaggedCaption],
    config: &LmConfig,
) -> Result<(LanguageModel<S>, LmTrainReport), LmError> {
    if corpus.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    // Vocabulary: markers first, then sorted corpus words.
    let mut words: BTreeSet<String> = BTreeSet::new();
    for (caption, _) in corpus {
        words.extend(caption.iter().cloned());
    }
    let mut vocabulary = vec![START.to_string(), END.to_string()];
    vocabulary.extend(words);
    let word_index: HashMap<String, u32> = vocabulary
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i as u32))
        .collect();

    let mut model = LanguageModel {
        vocabulary,
        word_index,
        n: config.n,
        template_version: 1,
        feature_index: HashMap::new(),
        feature_keys: Vec::new(),
        weights: Vec::new(),
    };
    let intern = |model: &mut LanguageModel<S>, key: FeatureKey| -> usize {
        if let Some(&i) = model.feature_index.get(&key) {
            return i;
        }
        let i = model.feature_keys.len();
        model.feature_index.insert(key.clone(), i);
        model.feature_keys.push(key);
        model.weights.push(S::zero());
        i
    };
    intern(&mut model, FeatureKey::TagMember);
    intern(&mut model, FeatureKey::EndGate);

    // Harvest n-gram features from observed events.
    let start = model.word_id(START).unwrap();
    let end = model.word_id(END).unwrap();
    struct Position {
        hist: Vec<u32>,
        target: u32,
        remaining_mask: u64,
        remaining_empty: bool,
    }
    let mut positions: Vec<Position> = Vec::new();
    for (caption, tags) in corpus {
        let mut remaining: BTreeSet<String> = tags.clone();
        let mut hist = vec![start; config.n];
        for step in 0..=caption.len() {
            let target = if step == caption.len() {
                end
            } else {
                model.word_id(&caption[step]).expect("corpus word interned")
            };
            positions.push(Position {
                hist: hist.clone(),
                target,
                remaining_mask: model.remaining_mask(&remaining),
                remaining_empty: remaining.is_empty(),
            });
            for k in 0..=config.n {
                intern(
                    &mut model,
                    FeatureKey::Ngram {
                        history: hist[config.n - k..].to_vec(),
                        word: target,
                    },
                );
            }
            if step < caption.len() {
                remaining.remove(&caption[step].to_lowercase());
                hist.rotate_left(1);
                hist[config.n - 1] = target;
            }
        }
    }

    // Feature id table per position and candidate word: (n + 1) slots each,
    // -1 when the feature does not exist in the model.
    let v = model.vocabulary.len();
    let orders = config.n + 1;
    let mut table: Vec<i32> = Vec::with_capacity(positions.len() * v * orders);
    for pos in &positions {
        for word in 0..v as u32 {
            for k in 0..=config.n {
                let key = FeatureKey::Ngram {
                    history: pos.hist[config.n - k..].to_vec(),
                    word,
                };
                table.push(model.feature_index.get(&key).map_or(-1, |&i| i as i32));
            }
        }
    }

    let tag_idx = model.feature_index[&FeatureKey::TagMember];
    let end_idx = model.feature_index[&FeatureKey::EndGate];
    let p_count = positions.len() as f64;
    let lr = config.learning_rate;
    let l2 = config.l2;
    let mut report = Vec::with_capacity(config.epochs);
    let mut grad = vec![0.0f64; model.weights.len()];
    let mut scores = vec![0.0f64; v];

    for _ in 0..config.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut ll = 0.0f64;
        let weights: Vec<f64> = model.weights.iter().map(|w| w.to_f64_lossy()).collect();
        let tag_w = weights[tag_idx];
        let end_w = weights[end_idx];
        for (p, pos) in positions.iter().enumerate() {
            let base = p * v * orders;
            for (word, slot) in scores.iter_mut().enumerate() {
                let mut s = 0.0;
                for k in 0..orders {
                    let f = table[base + word * orders + k];
                    if f >= 0 {
                        s += weights[f as usize];
                    }
                }
                if word < 64 && pos.remaining_mask & (1 << word) != 0 {
                    s += tag_w;
                }
                if word as u32 == end && pos.remaining_empty {
                    s += end_w;
                }
                *slot = s;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            ll += (scores[pos.target as usize] / z).ln();
            for word in 0..v {
                let p_word = scores[word] / z;
                let emp = if word as u32 == pos.target { 1.0 } else { 0.0 };
                let delta = emp - p_word;
                if delta == 0.0 {
                    continue;
                }
                for k in 0..orders {
                    let f = table[base + word * orders + k];
                    if f >= 0 {
                        grad[f as usize] += delta;
                    }
                }
                if word < 64 && pos.remaining_mask & (1 << word) != 0 {
                    grad[tag_idx] += delta;
                }
                if word as u32 == end && pos.remaining_empty {
                    grad[end_idx] += delta;
                }
            }
        }
        report.push(ll / p_count);
        for (i, w) in model.weights.iter_mut().enumerate() {
            let update = grad[i] / p_count - l2 * w.to_f64_lossy();
            *w = S::from_f64_lossy(w.to_f64_lossy() + lr * update);
        }
    }

    Ok((model, LmTrainReport { log_likelihood: report }))
}

#[derive(Clone)]
struct Hypothesis<S> {
    words: Vec<String>,
    score: S,
    remaining: BTreeSet<String>,
    covered: BTreeSet<String>,
    done: bool,
}

/// Beam-search decode conditioned on a tag set. Candidates end with the end
/// marker or at `max_len` words; the result is sorted by score descending
/// with ties broken by lexicographic word order.
pub fn beam_search<S: Scalar>(
    lm: &LanguageModel<S>,
    tags: &BTreeSet<String>,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<CaptionCandidate<S>>, LmError> {
    if beam_width == 0 {
        return Err(LmError::BadBeamWidth);
    }
    if max_len == 0 {
        return Err(LmError::BadMaxLen);
    }
    let mut beam = vec![Hypothesis {
        words: Vec::new(),
        score: S::zero(),
        remaining: tags.iter().map(|t| t.to_lowercase()).collect(),
        covered: BTreeSet::new(),
        done: false,
    }];
    for _ in 0..max_len {
        if beam.iter().all(|h| h.done) {
            break;
        }
        let mut candidates: Vec<Hypothesis<S>> = Vec::new();
        for hyp in &beam {
            if hyp.done {
                candidates.push(hyp.clone());
                continue;
            }
            let dist = lm.next_word_distribution(&hyp.words, &hyp.remaining)?;
            for (word_id, &p) in dist.iter().enumerate() {
                let word = &lm.vocabulary[word_id];
                let mut next = hyp.clone();
                next.score += p.ln();
                if word == END {
                    next.done = true;
                } else {
                    if next.remaining.remove(&word.to_lowercase()) {
                        next.covered.insert(word.to_lowercase());
                    }
                    next.words.push(word.clone());
                }
                candidates.push(next);
            }
        }
        sort_hypotheses(&mut candidates);
        candidates.truncate(beam_width);
        beam = candidates;
    }
    sort_hypotheses(&mut beam);
    Ok(beam
        .into_iter()
        .map(|h| CaptionCandidate {
            words: h.words,
            lm_score: h.score,
            covered_tags: h.covered,
            ended: h.done,
        })
        .collect())
}

fn sort_hypotheses<S: Scalar>(hyps: &mut [Hypothesis<S>]) {
    hyps.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.words.cmp(&b.words))
    });
}

#[derive(Serialize, Deserialize)]
struct LmMeta {
    kind: String,
    version: u32,
    vocabulary: Vec<String>,
    n: usize,
    template_version: u32,
    features: Vec<String>,
}

const LM_KIND: &str = "caption-lm";

fn encode_key(key: &FeatureKey, vocabulary: &[String]) -> String {
    match key {
        FeatureKey::TagMember => "tag".to_string(),
        FeatureKey::EndGate => "end".to_string(),
        FeatureKey::Ngram { history, word } => {
            let mut parts: Vec<&str> = history
                .iter()
                .map(|&h| vocabulary[h as usize].as_str())
                .collect();
            parts.push(vocabulary[*word as usize].as_str());
            format!("ng:{}", parts.join("|"))
        }
    }
}

fn decode_key(s: &str, index: &HashMap<String, u32>) -> Result<FeatureKey, LmError> {
    match s {
        "tag" => Ok(FeatureKey::TagMember),
        "end" => Ok(FeatureKey::EndGate),
        _ => {
            let body = s
                .strip_prefix("ng:")
                .ok_or_else(|| LmError::BadFile(format!("unknown feature {s:?}")))?;
            let mut ids = Vec::new();
            for part in body.split('|') {
                ids.push(
                    *index
                        .get(part)
                        .ok_or_else(|| LmError::BadFile(format!("feature word {part:?} not in vocabulary")))?,
                );
            }
            let word = ids.pop().ok_or_else(|| LmError::BadFile("empty n-gram feature".into()))?;
            Ok(FeatureKey::Ngram { history: ids, word })
        }
    }
}

impl<S: Scalar> LanguageModel<S> {
    /// Model file: length-prefixed JSON header then the binary weight table.
    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let meta = LmMeta {
            kind: LM_KIND.to_string(),
            version: 1,
            vocabulary: self.vocabulary.clone(),
            n: self.n,
            template_version: self.template_version,
            features: self
                .feature_keys
                .iter()
                .map(|k| encode_key(k, &self.vocabulary))
                .collect(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| LmError::BadFile(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        write_tensor(&mut w, &Tensor::new(&[self.weights.len().max(1)], {
            let mut v = self.weights.clone();
            if v.is_empty() {
                v.push(S::zero());
            }
            v
        })?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let meta: LmMeta =
            serde_json::from_slice(&json).map_err(|e| LmError::BadFile(e.to_string()))?;
        if meta.kind != LM_KIND {
            return Err(LmError::BadFile(format!("expected kind {LM_KIND:?}, got {:?}", meta.kind)));
        }
        let weights_tensor: Tensor<S> = read_tensor(&mut r)?;
        let word_index: HashMap<String, u32> = meta
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        let mut feature_keys = Vec::with_capacity(meta.features.len());
        let mut feature_index = HashMap::with_capacity(meta.features.len());
        for (i, encoded) in meta.features.iter().enumerate() {
            let key = decode_key(encoded, &word_index)?;
            feature_index.insert(key.clone(), i);
            feature_keys.push(key);
        }
        let mut weights = weights_tensor.into_data();
        weights.truncate(feature_keys.len());
        if weights.len() != feature_keys.len() {
            return Err(LmError::BadFile(format!(
                "weight table has {} entries, expected {}",
                weights.len(),
                feature_keys.len()
            )));
        }
        if !meta.vocabulary.contains(&END.to_string()) {
            return Err(LmError::BadFile("vocabulary lacks end marker".into()));
        }
        Ok(Self {
            vocabulary: meta.vocabulary,
            word_index,
            n: meta.n,
            template_version: meta.template_version,
            feature_index,
            feature_keys,
            weights,
        })
    }
}

/// Caption corpus file: UTF-8 lines of caption text, tab, comma-separated
/// tag list.
pub fn load_corpus_file(path: &Path) -> Result<Vec<TaggedCaption>, LmError> {
    let text = std::fs::read_to_string(path)?;
    let corpus: Vec<_> = text.lines().filter_map(parse_corpus_line).collect();
    if corpus.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    Ok(corpus)
}

/// Parse a corpus line: caption text, tab, comma-separated tag list.
pub fn parse_corpus_line(line: &str) -> Option<(Vec<String>, BTreeSet<String>)> {
    let mut parts = line.splitn(2, '\t');
    let caption = parts.next()?.trim();
    if caption.is_empty() {
        return None;
    }
    let tags = parts
        .next()
        .map(|t| {
            t.split(',')
                .map(|s| s.trim().to_lowercase())
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default();
    Some((
        caption.split_whitespace().map(|w| w.to_lowercase()).collect(),
        tags,
    ))
}
