//! Triplet corpus: manifest loading, label assignment, prompt templates,
//! binary visual payloads, and a synthetic generator.
//!
//! A manifest is a JSON-lines file. Each record names a payload file
//! (relative to the manifest), its modality, and exactly one of `caption`
//! or `class`:
//!
//! ```text
//! {"source": "img/0001.bin", "modality": "image", "class": "red circle", "split": "train"}
//! {"source": "vid/0001.bin", "modality": "video", "caption": "a red ball rolls left"}
//! ```
//!
//! Payloads hold a little-endian header of four `u16` (T, H, W, C)
//! followed by `T·H·W·C` little-endian `f32` values in T, H, W, C order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::Label;
use crate::text::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One `(x, y, t)` training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    /// `[T, H, W, C]`; `T = 1` for images.
    pub visual: Array4<f64>,
    pub label: Label,
    pub text: String,
    pub modality: Modality,
    pub class_name: Option<String>,
    pub split: Option<String>,
    pub source: String,
}

/// A caption template containing exactly one `{class}` slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(template: &str) -> Result<Self> {
        if template.matches("{class}").count() != 1 {
            return Err(Error::Argument(format!("template `{template}` must contain exactly one {{class}} slot")));
        }
        Ok(Self(template.to_string()))
    }

    pub fn render(&self, class: &str) -> String {
        self.0.replace("{class}", class)
    }
}

pub fn default_templates(modality: Modality) -> Vec<PromptTemplate> {
    let raw: &[&str] = match modality {
        Modality::Image => &["a picture of a {class}", "a photo of a {class}", "an image of a {class}"],
        Modality::Video => &["a video of a {class}", "a clip of a {class}", "footage of a {class}"],
    };
    raw.iter().map(|t| PromptTemplate::new(t).expect("valid template")).collect()
}

/// Renders a class name through template `index` (cycled).
pub fn label_to_text(class: &str, templates: &[PromptTemplate], index: usize) -> Result<String> {
    if class.trim().is_empty() {
        return Err(Error::Argument("class name is empty".into()));
    }
    if templates.is_empty() {
        return Err(Error::Argument("no prompt templates".into()));
    }
    Ok(templates[index % templates.len()].render(class.trim()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub source: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, rename = "class", skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ManifestOptions {
    pub image_templates: Vec<PromptTemplate>,
    pub video_templates: Vec<PromptTemplate>,
    /// Captions with identical text share a label when set.
    pub group_identical_captions: bool,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        Self {
            image_templates: default_templates(Modality::Image),
            video_templates: default_templates(Modality::Video),
            group_identical_captions: false,
        }
    }
}

impl ManifestOptions {
    fn templates(&self, modality: Modality) -> &[PromptTemplate] {
        match modality {
            Modality::Image => &self.image_templates,
            Modality::Video => &self.video_templates,
        }
    }
}

/// A question/answer pair about one triplet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaPair {
    pub index: usize,
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub triplets: Vec<Triplet>,
}

/// Assigns labels: class records share a label per distinct rendered text;
/// caption records get a fresh label each unless grouping is enabled.
struct Labeler {
    by_text: HashMap<String, Label>,
    next: Label,
}

impl Labeler {
    fn new() -> Self {
        Self {
            by_text: HashMap::new(),
            next: 0,
        }
    }

    fn shared(&mut self, text: &str) -> Label {
        let next = &mut self.next;
        *self.by_text.entry(text.to_string()).or_insert_with(|| {
            *next += 1;
            *next - 1
        })
    }

    fn fresh(&mut self) -> Label {
        self.next += 1;
        self.next - 1
    }
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Builds triplets from validated records and their decoded payloads.
    pub fn from_records(records: Vec<(ManifestRecord, Array4<f64>)>, opts: &ManifestOptions) -> Result<Self> {
        let mut labeler = Labeler::new();
        let mut triplets = Vec::with_capacity(records.len());
        for (i, (rec, visual)) in records.into_iter().enumerate() {
            let line = i + 1;
            check_record(&rec, visual.shape(), line)?;
            let (text, label) = match (&rec.caption, &rec.class_name) {
                (Some(c), None) => {
                    let label = if opts.group_identical_captions {
                        labeler.shared(c)
                    } else {
                        labeler.fresh()
                    };
                    (c.clone(), label)
                }
                (None, Some(class)) => {
                    let text = label_to_text(class, opts.templates(rec.modality), 0)
                        .map_err(|e| Error::Schema { line, msg: e.to_string() })?;
                    let label = labeler.shared(&text);
                    (text, label)
                }
                _ => unreachable!("checked above"),
            };
            triplets.push(Triplet {
                visual,
                label,
                text,
                modality: rec.modality,
                class_name: rec.class_name,
                split: rec.split,
                source: rec.source,
            });
        }
        Ok(Self { triplets })
    }

    pub fn indices(&self, modality: Modality) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.triplets[i].modality == modality).collect()
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.triplets.iter().filter(|t| t.modality == modality).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            triplets: indices.iter().map(|&i| self.triplets[i].clone()).collect(),
        }
    }

    /// Only triplets of one modality.
    pub fn filter(&self, modality: Modality) -> Corpus {
        self.subset(&self.indices(modality))
    }

    /// Records with the given split tag.
    pub fn split(&self, tag: &str) -> Corpus {
        Corpus {
            triplets: self
                .triplets
                .iter()
                .filter(|t| t.split.as_deref() == Some(tag))
                .cloned()
                .collect(),
        }
    }

    /// Appends another corpus. Labels of `other` are shifted past ours so
    /// the two label spaces stay disjoint.
    pub fn extend(&mut self, other: Corpus) {
        let offset = self.triplets.iter().map(|t| t.label + 1).max().unwrap_or(0);
        for mut t in other.triplets {
            t.label += offset;
            self.triplets.push(t);
        }
    }

    /// One generic question per class-labelled triplet, answered by the
    /// class name.
    pub fn qa_pairs(&self) -> Vec<QaPair> {
        self.triplets
            .iter()
            .enumerate()
            .filter_map(|(index, t)| {
                t.class_name.as_ref().map(|c| QaPair {
                    index,
                    question: qa_question(t.modality).to_string(),
                    answer: c.clone(),
                })
            })
            .collect()
    }

    /// Vocabulary covering captions, class names and QA questions.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut texts: Vec<&str> = self.triplets.iter().map(|t| t.text.as_str()).collect();
        texts.extend(self.triplets.iter().filter_map(|t| t.class_name.as_deref()));
        texts.push(qa_question(Modality::Image));
        texts.push(qa_question(Modality::Video));
        Vocabulary::build(texts)
    }

    /// Writes payloads under `dir` and a manifest at `dir/manifest.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut lines = String::new();
        for (i, t) in self.triplets.iter().enumerate() {
            let source = if t.source.is_empty() {
                format!("{}_{i:05}.bin", t.modality)
            } else {
                t.source.clone()
            };
            let path = dir.join(&source);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_payload(&path, &t.visual)?;
            let rec = ManifestRecord {
                source,
                modality: t.modality,
                caption: if t.class_name.is_none() { Some(t.text.clone()) } else { None },
                class_name: t.class_name.clone(),
                split: t.split.clone(),
            };
            lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            lines.push('\n');
        }
        let manifest = dir.join("manifest.jsonl");
        std::fs::write(&manifest, lines).map_err(|e| Error::io(&manifest, e))?;
        Ok(manifest)
    }
}

pub fn qa_question(modality: Modality) -> &'static str {
    match modality {
        Modality::Image => "what is in the picture",
        Modality::Video => "what is in the video",
    }
}

fn check_record(rec: &ManifestRecord, shape: &[usize], line: usize) -> Result<()> {
    let schema = |msg: String| Error::Schema { line, msg };
    match (&rec.caption, &rec.class_name) {
        (Some(_), Some(_)) => return Err(schema("record has both `caption` and `class`".into())),
        (None, None) => return Err(schema("record needs one of `caption` or `class`".into())),
        (Some(c), None) if c.trim().is_empty() => return Err(schema("empty caption".into())),
        _ => {}
    }
    if shape.contains(&0) {
        return Err(schema(format!("payload has an empty axis {shape:?}")));
    }
    match (rec.modality, shape[0]) {
        (Modality::Image, t) if t != 1 => Err(schema(format!("image payload has {t} frames"))),
        (Modality::Video, 1) => Err(schema("video payload has a single frame".into())),
        _ => Ok(()),
    }
}

/// Reads a manifest and every payload it references.
pub fn load_manifest(path: &Path, opts: &ManifestOptions) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            if e.is_data() {
                Error::Schema {
                    line: line_no,
                    msg: e.to_string(),
                }
            } else {
                Error::Parse {
                    line: line_no,
                    msg: e.to_string(),
                }
            }
        })?;
        let visual = read_payload(&base.join(&rec.source)).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::Schema {
                line: line_no,
                msg: other.to_string(),
            },
        })?;
        check_record(&rec, visual.shape(), line_no)?;
        records.push((rec, visual));
    }
    // Line numbers in errors below refer to record order, which matches
    // file order when the manifest has no blank lines.
    Corpus::from_records(records, opts)
}

pub fn write_payload(path: &Path, visual: &Array4<f64>) -> Result<()> {
    let shape = visual.shape();
    let mut bytes = Vec::with_capacity(8 + 4 * visual.len());
    for &d in shape {
        let d = u16::try_from(d).map_err(|_| Error::Argument(format!("payload axis {d} exceeds u16")))?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for &x in visual.iter() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_payload(path: &Path) -> Result<Array4<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Argument(format!("{}: truncated payload header", path.display())));
    }
    let dims: Vec<usize> = (0..4)
        .map(|i| u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != 8 + 4 * n {
        return Err(Error::Argument(format!(
            "{}: payload of shape {dims:?} needs {} bytes, found {}",
            path.display(),
            8 + 4 * n,
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument(format!("{}: payload contains non-finite values", path.display())));
    }
    Ok(Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data).expect("length checked"))
}

/// Synthetic corpus settings. Image classes are (color, shape) pairs;
/// video classes are (color, shape, direction) with the object moving
/// horizontally, so neighbouring video classes differ only in motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub frames: usize,
    /// Fraction of each class's samples rendered as video.
    pub video_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 8,
            n_per_class: 8,
            image_size: 32,
            channels: 3,
            frames: 4,
            video_fraction: 0.0,
        }
    }
}

const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [1.0, -0.6, -0.6]),
    ("green", [-0.6, 1.0, -0.6]),
    ("blue", [-0.6, -0.6, 1.0]),
    ("yellow", [1.0, 1.0, -0.6]),
];
const SHAPES: [&str; 4] = ["circle", "square", "cross", "ring"];
pub const MAX_IMAGE_CLASSES: usize = 16;
pub const MAX_VIDEO_CLASSES: usize = 32;

struct ClassSpec {
    color: usize,
    shape: usize,
    /// -1 left, +1 right, 0 static.
    direction: i32,
}

impl ClassSpec {
    fn of(c: usize, modality: Modality) -> Self {
        match modality {
            Modality::Image => Self {
                color: c % 4,
                shape: (c / 4) % 4,
                direction: 0,
            },
            Modality::Video => Self {
                color: (c / 2) % 4,
                shape: (c / 8) % 4,
                direction: if c.is_multiple_of(2) { -1 } else { 1 },
            },
        }
    }

    fn name(&self) -> String {
        let base = format!("{} {}", COLORS[self.color].0, SHAPES[self.shape]);
        match self.direction {
            0 => base,
            d if d < 0 => format!("{base} moving left"),
            _ => format!("{base} moving right"),
        }
    }
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    let dist = (dx * dx + dy * dy).sqrt();
    match SHAPES[shape] {
        "circle" => dist <= r,
        "square" => dx.abs().max(dy.abs()) <= 0.8 * r,
        "cross" => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        _ => (0.55 * r..=r).contains(&dist),
    }
}

fn render(spec: &ClassSpec, frames: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Array4<f64> {
    let size = cfg.image_size;
    let sz = size as f64;
    let r = sz / 4.0;
    let step = (sz / 8.0).max(1.0);
    let travel = step * (frames - 1) as f64;
    let cy = rng.random_range(r..=(sz - r));
    let (lo, hi) = (r, (sz - r - travel).max(r));
    let start = rng.random_range(lo..=hi);
    let x0 = if spec.direction < 0 { sz - start } else { start };
    let color = COLORS[spec.color].1;
    let mut out = Array4::zeros((frames, size, size, cfg.channels));
    for ((t, i, j, c), px) in out.indexed_iter_mut() {
        let cx = x0 + spec.direction as f64 * step * t as f64;
        let (dx, dy) = (j as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
        let noise: f64 = rng.random_range(-0.15..0.15);
        let v = if inside(spec.shape, dx, dy, r) { color[c % 3] } else { 0.0 } + noise;
        *px = (v as f32) as f64;
    }
    out
}

/// Generates a labelled synthetic corpus. Samples are rounded through
/// `f32` so a written and re-read corpus is bit-identical.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    if cfg.n_classes == 0 || cfg.n_per_class == 0 {
        return Err(Error::Argument("n_classes and n_per_class must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.video_fraction) {
        return Err(Error::Argument(format!("video_fraction {} outside [0, 1]", cfg.video_fraction)));
    }
    let n_video = (cfg.n_per_class as f64 * cfg.video_fraction).round() as usize;
    let n_image = cfg.n_per_class - n_video;
    if n_image > 0 && cfg.n_classes > MAX_IMAGE_CLASSES {
        return Err(Error::Argument(format!("at most {MAX_IMAGE_CLASSES} distinct image classes")));
    }
    if n_video > 0 && cfg.n_classes > MAX_VIDEO_CLASSES {
        return Err(Error::Argument(format!("at most {MAX_VIDEO_CLASSES} distinct video classes")));
    }
    if n_video > 0 && cfg.frames < 2 {
        return Err(Error::Argument("videos need at least 2 frames".into()));
    }
    if cfg.image_size < 4 || cfg.channels == 0 {
        return Err(Error::Argument("image_size must be ≥ 4 and channels positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.n_classes * cfg.n_per_class);
    for c in 0..cfg.n_classes {
        for k in 0..cfg.n_per_class {
            let (modality, frames) = if k < n_image {
                (Modality::Image, 1)
            } else {
                (Modality::Video, cfg.frames)
            };
            let spec = ClassSpec::of(c, modality);
            let visual = render(&spec, frames, cfg, &mut rng);
            let rec = ManifestRecord {
                source: format!("{modality}/{c:03}_{k:04}.bin"),
                modality,
                caption: None,
                class_name: Some(spec.name()),
                split: None,
            };
            records.push((rec, visual));
        }
    }
    Corpus::from_records(records, &ManifestOptions::default())
}
