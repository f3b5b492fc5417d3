//! Procedural generator of labeled training images with fully known ground
//! truth: colored shapes on a dark background, template captions, tag sets,
//! and optional entity glyphs in a reserved corner.
//!
//! Caption grammar (each choice drawn uniformly and independently):
//!
//! ```text
//! caption  := scene | "a" "photo" "of" scene
//! scene    := phrase
//!           | phrase rel phrase
//!           | phrase "and" phrase "and" phrase
//! phrase   := "a" color shape
//! color    := "red" | "green" | "blue" | "yellow"
//! shape    := "circle" | "square" | "triangle"
//! rel      := "above" | "beside"
//! ```
//!
//! The object count (1-3), every color, every shape, the relation, and the
//! photo variant are independent uniform draws, so the caption distribution
//! is exactly enumerable. Photo-variant images carry a white 1px frame, which
//! is what makes the "photo" tag visually detectable. Object positions are
//! derived from the relation, not the other way around, and objects never
//! enter the glyph corner.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::entity::EntityKind;
use crate::scalar::Scalar;
use crate::tensor::io::{read_tensor, write_tensor, FormatError};
use crate::tensor::{Tensor, TensorError};

pub const IMAGE_SIZE: usize = 32;
/// Glyph cell: rows and columns 2..10 of the image.
pub const GLYPH_ORIGIN: usize = 2;
pub const GLYPH_SIZE: usize = 8;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const RELATIONS: [&str; 2] = ["above", "beside"];
pub const PHOTO_TAG: &str = "photo";

const COLOR_RGB: [[f64; 3]; 4] = [
    [0.85, 0.12, 0.12],
    [0.12, 0.85, 0.12],
    [0.15, 0.15, 0.90],
    [0.90, 0.90, 0.12],
];
const BACKGROUND: f64 = 0.08;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("corpus size must be >= 1")]
    EmptyCorpus,
    #[error("caption has no swappable color or shape word: {0:?}")]
    NoSwappableWord(String),
    #[error("unknown glyph id {0:?}")]
    UnknownGlyph(String),
    #[error("corpus index line {line} is malformed: {reason}")]
    BadIndexLine { line: usize, reason: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// All eight tags an image can carry.
pub fn tag_inventory() -> Vec<String> {
    COLORS
        .iter()
        .chain(SHAPES.iter())
        .chain(std::iter::once(&PHOTO_TAG))
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    /// Center (row, col) in pixels.
    pub position: (usize, usize),
    /// Half-extent in pixels.
    pub half_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub relation: Option<usize>,
    pub photo: bool,
    pub entity: Option<&'static Glyph>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LabeledExample<S> {
    pub image: Tensor<S>,
    pub tags: BTreeSet<String>,
    pub caption: String,
    pub glyph_id: Option<String>,
    pub entity_descriptor: Option<Vec<S>>,
}

/// Fixed glyph inventory: horizontal bars are celebrities, vertical bars are
/// landmarks. The bar index selects the row or column inside the glyph cell.
#[derive(Debug, PartialEq, Eq)]
pub struct Glyph {
    pub id: &'static str,
    pub kind: EntityKind,
    pub name: &'static str,
    bar: usize,
    horizontal: bool,
}

pub const GLYPHS: [Glyph; 8] = [
    Glyph { id: "celebrity-0", kind: EntityKind::Celebrity, name: "Ada Example", bar: 1, horizontal: true },
    Glyph { id: "celebrity-1", kind: EntityKind::Celebrity, name: "Bo Example", bar: 3, horizontal: true },
    Glyph { id: "celebrity-2", kind: EntityKind::Celebrity, name: "Cy Example", bar: 5, horizontal: true },
    Glyph { id: "celebrity-3", kind: EntityKind::Celebrity, name: "Dee Example", bar: 7, horizontal: true },
    Glyph { id: "landmark-0", kind: EntityKind::Landmark, name: "Example Tower", bar: 1, horizontal: false },
    Glyph { id: "landmark-1", kind: EntityKind::Landmark, name: "Example Bridge", bar: 3, horizontal: false },
    Glyph { id: "landmark-2", kind: EntityKind::Landmark, name: "Example Arch", bar: 5, horizontal: false },
    Glyph { id: "landmark-3", kind: EntityKind::Landmark, name: "Example Dome", bar: 7, horizontal: false },
];

pub fn glyph_by_id(id: &str) -> Result<&'static Glyph, SynthError> {
    GLYPHS
        .iter()
        .find(|g| g.id == id)
        .ok_or_else(|| SynthError::UnknownGlyph(id.to_string()))
}

impl Glyph {
    /// 8x8 binary pattern rendered into the glyph cell.
    pub fn pattern(&self) -> [[bool; GLYPH_SIZE]; GLYPH_SIZE] {
        let mut p = [[false; GLYPH_SIZE]; GLYPH_SIZE];
        if self.horizontal {
            p[self.bar] = [true; GLYPH_SIZE];
        } else {
            for row in &mut p {
                row[self.bar] = true;
            }
        }
        p
    }
}

/// 16-dim unit descriptor of a binary glyph pattern: mean-centered row sums
/// concatenated with mean-centered column sums, L2-normalized. Returns `None`
/// for constant patterns (no glyph present).
pub fn descriptor_from_pattern<S: Scalar>(
    pattern: &[[bool; GLYPH_SIZE]; GLYPH_SIZE],
) -> Option<Vec<S>> {
    let mut rows = [0.0f64; GLYPH_SIZE];
    let mut cols = [0.0f64; GLYPH_SIZE];
    for (r, row) in pattern.iter().enumerate() {
        for (c, &on) in row.iter().enumerate() {
            if on {
                rows[r] += 1.0;
                cols[c] += 1.0;
            }
        }
    }
    let row_mean = rows.iter().sum::<f64>() / GLYPH_SIZE as f64;
    let col_mean = cols.iter().sum::<f64>() / GLYPH_SIZE as f64;
    let mut d: Vec<f64> = rows
        .iter()
        .map(|&v| v - row_mean)
        .chain(cols.iter().map(|&v| v - col_mean))
        .collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    for v in &mut d {
        *v /= norm;
    }
    Some(d.into_iter().map(S::from_f64_lossy).collect())
}

/// Deterministic 16-dim unit descriptor for a glyph id.
pub fn entity_descriptor<S: Scalar>(glyph_id: &str) -> Result<Vec<S>, SynthError> {
    let glyph = glyph_by_id(glyph_id)?;
    descriptor_from_pattern(&glyph.pattern())
        .ok_or_else(|| SynthError::UnknownGlyph(glyph_id.to_string()))
}

/// Extract the glyph-cell descriptor from an image, if a glyph is present.
/// The cell is thresholded at 0.5 after channel averaging; a constant cell
/// (plain background) yields `None`.
pub fn glyph_probe<S: Scalar>(image: &Tensor<S>) -> Option<Vec<S>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return None;
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h < GLYPH_ORIGIN + GLYPH_SIZE || w < GLYPH_ORIGIN + GLYPH_SIZE {
        return None;
    }
    let data = image.data();
    let mut pattern = [[false; GLYPH_SIZE]; GLYPH_SIZE];
    let mut any = false;
    let mut all = true;
    for (r, row) in pattern.iter_mut().enumerate() {
        for (c, slot) in row.iter_mut().enumerate() {
            let (y, x) = (GLYPH_ORIGIN + r, GLYPH_ORIGIN + c);
            let mut v = 0.0;
            for ch in 0..3 {
                v += data[ch * h * w + y * w + x].to_f64_lossy();
            }
            let on = v / 3.0 >= 0.5;
            *slot = on;
            any |= on;
            all &= on;
        }
    }
    if !any || all {
        return None;
    }
    descriptor_from_pattern(&pattern)
}

/// Deterministic corpus of labeled examples. `glyph_prob` is the probability
/// that an example carries an entity glyph.
pub fn generate_corpus<S: Scalar>(seed: u64, n: usize, glyph_prob: f64) -> Result<Vec<LabeledExample<S>>, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyCorpus);
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let example_seed: u64 = master.random();
        out.push(generate_example(example_seed, glyph_prob));
    }
    Ok(out)
}

/// Single example from its own seed.
pub fn generate_example<S: Scalar>(seed: u64, glyph_prob: f64) -> LabeledExample<S> {
    let scene = sample_scene(seed, glyph_prob);
    example_from_scene(&scene)
}

fn sample_scene(seed: u64, glyph_prob: f64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=3usize);
    let relation = if count == 2 {
        Some(rng.random_range(0..RELATIONS.len()))
    } else {
        None
    };
    let photo = rng.random::<f64>() < 0.5;
    let mut objects = Vec::with_capacity(count);
    for slot in 0..count {
        let color = rng.random_range(0..COLORS.len());
        let shape = rng.random_range(0..SHAPES.len());
        // Objects are drawn as large as their layout region allows.
        let half_size = match (count, relation) {
            (1, _) => rng.random_range(5..=7usize),
            (2, Some(1)) => rng.random_range(4..=5usize),
            _ => rng.random_range(3..=4usize),
        };
        let (base_row, base_col) = object_anchor(count, relation, slot);
        let jr = rng.random_range(0..=2usize);
        let jc = rng.random_range(0..=2usize);
        objects.push(SceneObject {
            color,
            shape,
            position: (base_row + jr, base_col + jc),
            half_size,
        });
    }
    let entity = if rng.random::<f64>() < glyph_prob {
        Some(&GLYPHS[rng.random_range(0..GLYPHS.len())])
    } else {
        None
    };
    SceneSpec {
        objects,
        relation,
        photo,
        entity,
        seed,
    }
}

/// Region anchor (center row, center col) minus jitter for each object slot.
/// Regions stay clear of the glyph cell and never overlap each other.
fn object_anchor(count: usize, relation: Option<usize>, slot: usize) -> (usize, usize) {
    match (count, relation, slot) {
        (1, _, 0) => (20, 15),
        // "above": first object on top, second below.
        (2, Some(0), 0) => (15, 15),
        (2, Some(0), 1) => (25, 15),
        // "beside": first object left, second right.
        (2, Some(1), 0) => (20, 7),
        (2, Some(1), 1) => (20, 22),
        // Three in a row.
        (3, _, 0) => (20, 5),
        (3, _, 1) => (20, 15),
        (3, _, 2) => (20, 25),
        _ => unreachable!("object slot out of range"),
    }
}

pub fn example_from_scene<S: Scalar>(scene: &SceneSpec) -> LabeledExample<S> {
    let caption = scene_caption(scene);
    let tags = scene_tags(scene);
    let image = render_scene(scene);
    let (glyph_id, entity_descriptor) = match scene.entity {
        Some(glyph) => (
            Some(glyph.id.to_string()),
            descriptor_from_pattern::<S>(&glyph.pattern()),
        ),
        None => (None, None),
    };
    LabeledExample {
        image,
        tags,
        caption,
        glyph_id,
        entity_descriptor,
    }
}

pub fn scene_caption(scene: &SceneSpec) -> String {
    let phrase =
        |o: &SceneObject| format!("a {} {}", COLORS[o.color], SHAPES[o.shape]);
    let body = match scene.objects.len() {
        1 => phrase(&scene.objects[0]),
        2 => format!(
            "{} {} {}",
            phrase(&scene.objects[0]),
            RELATIONS[scene.relation.expect("two-object scene has a relation")],
            phrase(&scene.objects[1])
        ),
        _ => format!(
            "{} and {} and {}",
            phrase(&scene.objects[0]),
            phrase(&scene.objects[1]),
            phrase(&scene.objects[2])
        ),
    };
    if scene.photo {
        format!("a photo of {body}")
    } else {
        body
    }
}

pub fn scene_tags(scene: &SceneSpec) -> BTreeSet<String> {
    let mut tags = BTreeSet::new();
    for o in &scene.objects {
        tags.insert(COLORS[o.color].to_string());
        tags.insert(SHAPES[o.shape].to_string());
    }
    if scene.photo {
        tags.insert(PHOTO_TAG.to_string());
    }
    tags
}

fn render_scene<S: Scalar>(scene: &SceneSpec) -> Tensor<S> {
    let hw = IMAGE_SIZE;
    let mut planes = vec![BACKGROUND; 3 * hw * hw];
    // Photo frame: 1px white border.
    if scene.photo {
        for ch in 0..3 {
            for i in 0..hw {
                for (y, x) in [(0, i), (hw - 1, i), (i, 0), (i, hw - 1)] {
                    planes[ch * hw * hw + y * hw + x] = 1.0;
                }
            }
        }
    }
    // Entity glyph cell: black cell with white bars.
    if let Some(glyph) = scene.entity {
        for (r, row) in glyph.pattern().iter().enumerate() {
            for (c, &on) in row.iter().enumerate() {
                let v = if on { 1.0 } else { 0.0 };
                let (y, x) = (GLYPH_ORIGIN + r, GLYPH_ORIGIN + c);
                for ch in 0..3 {
                    planes[ch * hw * hw + y * hw + x] = v;
                }
            }
        }
    }
    for o in &scene.objects {
        paint_object(&mut planes, o, hw);
    }
    Tensor::new(
        &[3, hw, hw],
        planes.into_iter().map(S::from_f64_lossy).collect(),
    )
    .expect("image shape is valid")
}

fn paint_object(planes: &mut [f64], o: &SceneObject, hw: usize) {
    let rgb = COLOR_RGB[o.color];
    let (cy, cx) = (o.position.0 as isize, o.position.1 as isize);
    let h = o.half_size as isize;
    for dy in -h..=h {
        for dx in -h..=h {
            let inside = match o.shape {
                0 => dy * dy + dx * dx <= h * h,
                1 => true,
                // Triangle: apex at the top row, widening downward.
                _ => dx.abs() * 2 * h <= (dy + h) * h,
            };
            if !inside {
                continue;
            }
            let (y, x) = (cy + dy, cx + dx);
            if y < 1 || x < 1 || y >= hw as isize - 1 || x >= hw as isize - 1 {
                continue;
            }
            for ch in 0..3 {
                planes[ch * hw * hw + y as usize * hw + x as usize] = rgb[ch];
            }
        }
    }
}

/// Swap one color or shape word for a different inventory member such that
/// the corrupted caption's tag set differs from the original's.
pub fn corrupt_caption(caption: &str, seed: u64) -> Result<String, SynthError> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let original_tags = caption_tag_set(caption);
    let mut swappable: Vec<(usize, bool)> = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if COLORS.contains(w) {
            swappable.push((i, true));
        } else if SHAPES.contains(w) {
            swappable.push((i, false));
        }
    }
    if swappable.is_empty() {
        return Err(SynthError::NoSwappableWord(caption.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos_offset = rng.random_range(0..swappable.len());
    let alt_offset = rng.random_range(0..4usize);
    for k in 0..swappable.len() {
        let (idx, is_color) = swappable[(pos_offset + k) % swappable.len()];
        let inventory: &[&str] = if is_color { &COLORS } else { &SHAPES };
        let alternatives: Vec<&&str> =
            inventory.iter().filter(|w| **w != words[idx]).collect();
        for j in 0..alternatives.len() {
            let candidate = *alternatives[(alt_offset + j) % alternatives.len()];
            let mut corrupted = words.clone();
            corrupted[idx] = candidate;
            let corrupted = corrupted.join(" ");
            if caption_tag_set(&corrupted) != original_tags {
                return Ok(corrupted);
            }
        }
    }
    Err(SynthError::NoSwappableWord(caption.to_string()))
}

/// Tag set implied by a caption's words (exact lowercase word match).
pub fn caption_tag_set(caption: &str) -> BTreeSet<String> {
    let inventory = tag_inventory();
    caption
        .split_whitespace()
        .filter(|w| inventory.iter().any(|t| t == w))
        .map(|w| w.to_string())
        .collect()
}

/// Write a corpus as binary images plus a tab-separated index file.
pub fn save_corpus<S: Scalar>(dir: &Path, corpus: &[LabeledExample<S>]) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    let mut index = BufWriter::new(fs::File::create(dir.join("index.txt"))?);
    for (i, ex) in corpus.iter().enumerate() {
        let file = format!("img_{i:05}.tns");
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        write_tensor(&mut w, &ex.image)?;
        w.flush()?;
        let tags: Vec<&str> = ex.tags.iter().map(|s| s.as_str()).collect();
        match &ex.glyph_id {
            Some(g) => writeln!(index, "{file}\t{}\t{}\t{g}", tags.join(","), ex.caption)?,
            None => writeln!(index, "{file}\t{}\t{}", tags.join(","), ex.caption)?,
        }
    }
    index.flush()?;
    Ok(())
}

/// Load a corpus previously written by [`save_corpus`].
pub fn load_corpus<S: Scalar>(dir: &Path) -> Result<Vec<LabeledExample<S>>, SynthError> {
    let index = fs::read_to_string(dir.join("index.txt"))?;
    let mut out = Vec::new();
    for (lineno, line) in index.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() < 3 || parts.len() > 4 {
            return Err(SynthError::BadIndexLine {
                line: lineno + 1,
                reason: format!("expected 3 or 4 tab-separated fields, got {}", parts.len()),
            });
        }
        let mut r = BufReader::new(fs::File::open(dir.join(parts[0]))?);
        let image = read_tensor(&mut r)?;
        let tags: BTreeSet<String> = parts[1]
            .split(',')
            .filter(|t| !t.is_empty())
            .map(|t| t.to_string())
            .collect();
        let glyph_id = parts.get(3).map(|s| s.to_string());
        let entity_descriptor = match &glyph_id {
            Some(id) => Some(entity_descriptor(id)?),
            None => None,
        };
        out.push(LabeledExample {
            image,
            tags,
            caption: parts[2].to_string(),
            glyph_id,
            entity_descriptor,
        });
    }
    if out.is_empty() {
        return Err(SynthError::EmptyCorpus);
    }
    Ok(out)
}
