//! Celebrity and landmark recognition against a fixed embedding gallery,
//! plus caption rewriting for matched entities.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::synth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Celebrity,
    Landmark,
}

#[derive(Debug, Error)]
pub enum EntityError {
    #[error("duplicate gallery entry name {0:?}")]
    DuplicateName(String),
    #[error("gallery entry {0:?} has a zero embedding")]
    ZeroEmbedding(String),
    #[error("gallery entry {name:?} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("probe has dimension {got}, gallery uses {expected}")]
    ProbeDimension { expected: usize, got: usize },
    #[error("probe is not unit-norm (|v| = {norm})")]
    ProbeNotUnit { norm: f64 },
    #[error("gallery file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("gallery file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub name: String,
    pub kind: EntityKind,
    pub embedding: Vec<f64>,
    pub replace_words: Vec<String>,
}

/// Immutable set of named unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct EntityGallery<S> {
    entries: Vec<Entry<S>>,
    dim: usize,
}

#[derive(Debug, Clone)]
struct Entry<S> {
    name: String,
    kind: EntityKind,
    embedding: Vec<S>,
    replace_words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMatch {
    pub name: String,
    pub kind: EntityKind,
    pub similarity: f64,
    pub matched: bool,
}

impl<S: Scalar> EntityGallery<S> {
    /// Build a gallery, normalizing embeddings and rejecting duplicates.
    pub fn from_entries(raw: Vec<GalleryEntry>) -> Result<Self, EntityError> {
        let mut entries: Vec<Entry<S>> = Vec::with_capacity(raw.len());
        let mut dim = 0usize;
        for entry in raw {
            if entries.iter().any(|e| e.name == entry.name) {
                return Err(EntityError::DuplicateName(entry.name));
            }
            if dim == 0 {
                dim = entry.embedding.len();
            } else if entry.embedding.len() != dim {
                return Err(EntityError::DimensionMismatch {
                    name: entry.name,
                    expected: dim,
                    got: entry.embedding.len(),
                });
            }
            let norm = entry.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(EntityError::ZeroEmbedding(entry.name));
            }
            entries.push(Entry {
                name: entry.name,
                kind: entry.kind,
                embedding: entry
                    .embedding
                    .iter()
                    .map(|&v| S::from_f64_lossy(v / norm))
                    .collect(),
                replace_words: entry
                    .replace_words
                    .iter()
                    .map(|w| w.to_lowercase())
                    .collect(),
            });
        }
        Ok(Self { entries, dim })
    }

    pub fn load(path: &Path) -> Result<Self, EntityError> {
        let raw: Vec<GalleryEntry> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_entries(raw)
    }

    pub fn save(&self, path: &Path) -> Result<(), EntityError> {
        let raw: Vec<GalleryEntry> = self
            .entries
            .iter()
            .map(|e| GalleryEntry {
                name: e.name.clone(),
                kind: e.kind,
                embedding: e.embedding.iter().map(|v| v.to_f64_lossy()).collect(),
                replace_words: e.replace_words.clone(),
            })
            .collect();
        std::fs::write(path, serde_json::to_string_pretty(&raw)?)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn replace_words_of(&self, name: &str) -> &[String] {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.replace_words.as_slice())
            .unwrap_or(&[])
    }
}

/// Score every gallery entry against a unit-norm probe. Results come back
/// sorted by similarity descending with at most one matched entity per kind.
pub fn recognize<S: Scalar>(
    gallery: &EntityGallery<S>,
    probe: &[S],
    threshold: f64,
) -> Result<Vec<EntityMatch>, EntityError> {
    if gallery.is_empty() {
        return Ok(Vec::new());
    }
    if probe.len() != gallery.dim {
        return Err(EntityError::ProbeDimension {
            expected: gallery.dim,
            got: probe.len(),
        });
    }
    let norm = probe
        .iter()
        .map(|&v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(EntityError::ProbeNotUnit { norm });
    }
    let mut matches: Vec<EntityMatch> = gallery
        .entries
        .iter()
        .map(|e| {
            let similarity = e
                .embedding
                .iter()
                .zip(probe.iter())
                .map(|(&a, &b)| (a * b).to_f64_lossy())
                .sum::<f64>();
            EntityMatch {
                name: e.name.clone(),
                kind: e.kind,
                similarity,
                matched: false,
            }
        })
        .collect();
    matches.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.name.cmp(&b.name))
    });
    let mut kind_taken = [false; 2];
    for m in &mut matches {
        let slot = match m.kind {
            EntityKind::Celebrity => 0,
            EntityKind::Landmark => 1,
        };
        if !kind_taken[slot] && m.similarity >= threshold {
            m.matched = true;
            kind_taken[slot] = true;
        }
    }
    Ok(matches)
}

/// Rewrite a caption for the matched entities, in similarity order.
///
/// For each matched entity, the first occurrence of one of its replace words
/// (with an immediately preceding article removed) becomes the entity name.
/// A caption word is consumed at most once. When no replace word occurs, a
/// landmark is appended as "at <name>" and a celebrity leaves the caption
/// unchanged. Entities whose names already appear are skipped, which makes
/// the rewrite idempotent for a fixed match set.
pub fn enrich_caption<S: Scalar>(
    words: &[String],
    matches: &[EntityMatch],
    gallery: &EntityGallery<S>,
) -> Vec<String> {
    struct Token {
        text: String,
        consumed: bool,
    }
    let mut tokens: Vec<Token> = words
        .iter()
        .map(|w| Token {
            text: w.clone(),
            consumed: false,
        })
        .collect();
    for m in matches.iter().filter(|m| m.matched) {
        let name_words: Vec<&str> = m.name.split_whitespace().collect();
        let texts: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
        if contains_sequence(&texts, &name_words) {
            continue;
        }
        let replace_words = gallery.replace_words_of(&m.name);
        let hit = tokens.iter().position(|t| {
            !t.consumed && replace_words.iter().any(|r| r == &t.text.to_lowercase())
        });
        match hit {
            Some(idx) => {
                let start = if idx > 0
                    && !tokens[idx - 1].consumed
                    && matches!(tokens[idx - 1].text.as_str(), "a" | "an" | "the")
                {
                    idx - 1
                } else {
                    idx
                };
                tokens.splice(
                    start..=idx,
                    name_words.iter().map(|w| Token {
                        text: w.to_string(),
                        consumed: true,
                    }),
                );
            }
            None => {
                if m.kind == EntityKind::Landmark {
                    tokens.push(Token {
                        text: "at".to_string(),
                        consumed: true,
                    });
                    tokens.extend(name_words.iter().map(|w| Token {
                        text: w.to_string(),
                        consumed: true,
                    }));
                }
            }
        }
    }
    tokens.into_iter().map(|t| t.text).collect()
}

fn contains_sequence(words: &[&str], needle: &[&str]) -> bool {
    if needle.is_empty() || words.len() < needle.len() {
        return false;
    }
    words
        .windows(needle.len())
        .any(|w| w.iter().zip(needle.iter()).all(|(a, b)| a == b))
}

/// Gallery over the synthetic glyph inventory. Celebrities stand in for the
/// generic nouns of the synthetic world (people do not occur in it, shapes
/// do); landmarks use nouns that never occur, exercising the append path.
pub fn default_gallery<S: Scalar>() -> EntityGallery<S> {
    let entries = synth::GLYPHS
        .iter()
        .map(|glyph| GalleryEntry {
            name: glyph.name.to_string(),
            kind: glyph.kind,
            embedding: synth::entity_descriptor::<f64>(glyph.id)
                .expect("glyph inventory descriptors exist"),
            replace_words: match glyph.kind {
                EntityKind::Celebrity => vec![
                    "man".into(),
                    "woman".into(),
                    "person".into(),
                    "circle".into(),
                    "square".into(),
                    "triangle".into(),
                ],
                EntityKind::Landmark => vec![
                    "tower".into(),
                    "bridge".into(),
                    "arch".into(),
                    "dome".into(),
                    "building".into(),
                ],
            },
        })
        .collect();
    EntityGallery::from_entries(entries).expect("default gallery is well-formed")
}
