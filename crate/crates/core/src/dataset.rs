//! Deterministic synthetic corpus: flat-colored geometric shapes on a gray
//! background with box annotations and relational captions.
//!
//! Twelve categories — three shapes times four colors — stand in for a real
//! object vocabulary. Scenes hold one or two objects in pixel-snapped,
//! strictly disjoint boxes; captions come from a bijective grammar
//! (`"a red circle to the left of a blue square"`) whose relation word is
//! recomputable from the box centroids, so every caption can be parsed back
//! to exact ground truth. Rendering is hard-edged (no anti-aliasing), which
//! keeps the color-quantizing oracle detector in [`crate::eval`] exact on
//! ground-truth images.
//!
//! All sampling derives a per-scene RNG stream from `(seed, index)`, so
//! datasets are reproducible byte for byte and scenes can be generated in
//! any order or in parallel.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::BBox;
use crate::tensor::Tensor;
use crate::text::{TokenizedPrompt, Vocabulary};

/// Canvas side in pixels.
pub const IMAGE_SIZE: usize = 32;
/// Smallest shape box side in pixels.
pub const MIN_SHAPE_SIDE: usize = 8;
/// Largest shape box side for single-object scenes.
pub const MAX_SHAPE_SIDE: usize = 16;
/// Largest shape box side when two objects must fit disjointly.
pub const MAX_SHAPE_SIDE_PAIR: usize = 14;
/// Background gray levels are drawn from this inclusive range; all of it
/// quantizes to "background" for the detector's nearest-color test.
pub const BACKGROUND_RANGE: (u8, u8) = (96, 160);
/// Reference background color for nearest-color quantization.
pub const BACKGROUND_RGB: [u8; 3] = [128, 128, 128];
/// The (shape, color) class excluded from training captions by default,
/// reserved as the "new concept" for inversion experiments.
pub const DEFAULT_HELD_OUT: (ShapeKind, ColorName) = (ShapeKind::Triangle, ColorName::Yellow);

// ── classes ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Result<ShapeKind> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape {s:?}")))
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ColorName {
    pub const ALL: [ColorName; 4] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
        }
    }

    pub fn parse(s: &str) -> Result<ColorName> {
        ColorName::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown color {s:?}")))
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ColorName::Red => [255, 0, 0],
            ColorName::Green => [0, 255, 0],
            ColorName::Blue => [0, 0, 255],
            ColorName::Yellow => [255, 255, 0],
        }
    }
}

impl fmt::Display for ColorName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The twelve (shape, color) classes in a stable order.
pub fn all_classes() -> Vec<(ShapeKind, ColorName)> {
    let mut out = Vec::with_capacity(12);
    for shape in ShapeKind::ALL {
        for color in ColorName::ALL {
            out.push((shape, color));
        }
    }
    out
}

// ── scenes ───────────────────────────────────────────────────────────────────

/// One placed object: its class and its pixel-snapped box in normalized
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: ColorName,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl SceneObject {
    pub fn centroid(&self) -> (f64, f64) {
        (
            0.5 * (self.bbox.x0 + self.bbox.x1),
            0.5 * (self.bbox.y0 + self.bbox.y1),
        )
    }
}

/// A full scene description; rendering and captioning are pure functions
/// of it. `seed`/`index` record which RNG stream produced the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    /// Background gray level.
    pub background: u8,
    pub seed: u64,
    pub index: u64,
}

/// Spatial relation of the first captioned object relative to the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "left of")]
    LeftOf,
    #[serde(rename = "right of")]
    RightOf,
    #[serde(rename = "above")]
    Above,
    #[serde(rename = "below")]
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    /// The caption phrase between the two object mentions.
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "to the left of",
            Relation::RightOf => "to the right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    pub fn horizontal(self) -> bool {
        matches!(self, Relation::LeftOf | Relation::RightOf)
    }
}

/// Relation of centroid `a` relative to centroid `b` (image coordinates,
/// y growing downward). The axis with the larger separation decides;
/// horizontal wins exact ties.
pub fn relation_from_centroids(a: (f64, f64), b: (f64, f64)) -> Relation {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    if dx.abs() >= dy.abs() {
        if dx <= 0.0 {
            Relation::LeftOf
        } else {
            Relation::RightOf
        }
    } else if dy <= 0.0 {
        Relation::Above
    } else {
        Relation::Below
    }
}

impl SceneSpec {
    /// The caption relation, defined for two-object scenes.
    pub fn relation(&self) -> Option<Relation> {
        match self.objects.as_slice() {
            [a, b] => Some(relation_from_centroids(a.centroid(), b.centroid())),
            _ => None,
        }
    }
}

// ── scene sampling ───────────────────────────────────────────────────────────

fn pixel_box(x0: usize, y0: usize, side: usize) -> BBox {
    let s = IMAGE_SIZE as f64;
    BBox::new(
        x0 as f64 / s,
        y0 as f64 / s,
        (x0 + side) as f64 / s,
        (y0 + side) as f64 / s,
    )
    .expect("pixel boxes are valid by construction")
}

fn pixel_bounds(bbox: &BBox) -> (usize, usize, usize, usize) {
    let s = IMAGE_SIZE as f64;
    (
        (bbox.x0 * s).round() as usize,
        (bbox.y0 * s).round() as usize,
        (bbox.x1 * s).round() as usize,
        (bbox.y1 * s).round() as usize,
    )
}

/// True when the boxes are at least one pixel apart on some axis, so the
/// rendered components can never touch (stricter than zero overlap).
fn gap_disjoint(a: &BBox, b: &BBox) -> bool {
    let (ax0, ay0, ax1, ay1) = pixel_bounds(a);
    let (bx0, by0, bx1, by1) = pixel_bounds(b);
    ax1 + 1 <= bx0 || bx1 + 1 <= ax0 || ay1 + 1 <= by0 || by1 + 1 <= ay0
}

fn draw_class<R: Rng>(rng: &mut R, exclude: Option<(ShapeKind, ColorName)>) -> (ShapeKind, ColorName) {
    loop {
        let shape = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
        let color = ColorName::ALL[rng.gen_range(0..ColorName::ALL.len())];
        if Some((shape, color)) != exclude {
            return (shape, color);
        }
    }
}

fn draw_box<R: Rng>(rng: &mut R, max_side: usize) -> BBox {
    let side = rng.gen_range(MIN_SHAPE_SIDE..=max_side);
    let x0 = rng.gen_range(0..=IMAGE_SIZE - side);
    let y0 = rng.gen_range(0..=IMAGE_SIZE - side);
    pixel_box(x0, y0, side)
}

/// Draws the scene for `(seed, index)`: one or two objects with distinct
/// classes in disjoint square boxes, none equal to `exclude`. The same
/// arguments always produce the same scene.
pub fn sample_spec(
    seed: u64,
    index: u64,
    exclude: Option<(ShapeKind, ColorName)>,
) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let background = rng.gen_range(BACKGROUND_RANGE.0..=BACKGROUND_RANGE.1);
    let two = rng.gen_bool(0.5);

    let first = draw_class(&mut rng, exclude);
    let objects = if two {
        let second = loop {
            let c = draw_class(&mut rng, exclude);
            if c != first {
                break c;
            }
        };
        let mut attempts = 0;
        let (a, b) = loop {
            let a = draw_box(&mut rng, MAX_SHAPE_SIDE_PAIR);
            let b = draw_box(&mut rng, MAX_SHAPE_SIDE_PAIR);
            if gap_disjoint(&a, &b) {
                break (a, b);
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::invalid(
                    "could not place two disjoint boxes (unreachable by construction)",
                ));
            }
        };
        vec![
            SceneObject { shape: first.0, color: first.1, bbox: a },
            SceneObject { shape: second.0, color: second.1, bbox: b },
        ]
    } else {
        let bbox = draw_box(&mut rng, MAX_SHAPE_SIDE);
        vec![SceneObject { shape: first.0, color: first.1, bbox }]
    };

    Ok(SceneSpec { objects, background, seed, index })
}

// ── rendering ────────────────────────────────────────────────────────────────

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn boxes_overlap(a: &BBox, b: &BBox) -> bool {
    interval_overlap(a.x0, a.x1, b.x0, b.x1) > 0.0 && interval_overlap(a.y0, a.y1, b.y0, b.y1) > 0.0
}

/// Rasterizes the scene at [`IMAGE_SIZE`]: flat background, each shape in
/// its exact color within its pixel box — circle inscribed, square
/// filling, isoceles triangle (apex top-center, base on the bottom edge).
/// Hard edges by pixel-center membership; overlapping boxes are rejected.
pub fn render_scene(spec: &SceneSpec) -> Result<RgbImage> {
    for (i, a) in spec.objects.iter().enumerate() {
        for b in &spec.objects[i + 1..] {
            if boxes_overlap(&a.bbox, &b.bbox) {
                return Err(Error::invalid(format!(
                    "scene objects overlap: [{}, {}, {}, {}] vs [{}, {}, {}, {}]",
                    a.bbox.x0, a.bbox.y0, a.bbox.x1, a.bbox.y1, b.bbox.x0, b.bbox.y0,
                    b.bbox.x1, b.bbox.y1
                )));
            }
        }
    }

    let side = IMAGE_SIZE as u32;
    let bg = image::Rgb([spec.background; 3]);
    let mut img = RgbImage::from_pixel(side, side, bg);
    for object in &spec.objects {
        let (x0, y0, x1, y1) = pixel_bounds(&object.bbox);
        let color = image::Rgb(object.color.rgb());
        let (w, h) = ((x1 - x0) as f64, (y1 - y0) as f64);
        let (cx, cy) = (x0 as f64 + w / 2.0, y0 as f64 + h / 2.0);
        for y in y0..y1.min(IMAGE_SIZE) {
            for x in x0..x1.min(IMAGE_SIZE) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = match object.shape {
                    ShapeKind::Square => true,
                    ShapeKind::Circle => {
                        let r = w.min(h) / 2.0;
                        let (dx, dy) = (px - cx, py - cy);
                        dx * dx + dy * dy <= r * r
                    }
                    ShapeKind::Triangle => {
                        // Half-width grows linearly from the apex to the base,
                        // measured at each row's bottom edge so the apex row
                        // fills and the footprint spans the whole box.
                        let frac = (y + 1 - y0) as f64 / h;
                        (px - cx).abs() <= frac * w / 2.0
                    }
                };
                if inside {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    Ok(img)
}

/// Maps 8-bit RGB to the training range: a `(3, h, w)` tensor in [-1, 1].
pub fn image_to_latent(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * h * w + y * w + x] = px[c] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image dimensions are valid")
}

// ── captions ─────────────────────────────────────────────────────────────────

/// Caption for a one- or two-object scene: `"a {color} {shape}"`, joined
/// for pairs by the relation phrase from the centroid rule.
pub fn caption_scene(spec: &SceneSpec) -> Result<String> {
    let mention = |o: &SceneObject| format!("a {} {}", o.color, o.shape);
    match spec.objects.as_slice() {
        [one] => Ok(mention(one)),
        [first, second] => {
            let relation = relation_from_centroids(first.centroid(), second.centroid());
            Ok(format!(
                "{} {} {}",
                mention(first),
                relation.phrase(),
                mention(second)
            ))
        }
        _ => Err(Error::invalid(format!(
            "captions cover 1 or 2 objects, scene has {}",
            spec.objects.len()
        ))),
    }
}

/// A caption decomposed back into ground truth by the inverse grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCaption {
    pub objects: Vec<(ColorName, ShapeKind)>,
    pub relation: Option<Relation>,
}

/// Inverse of [`caption_scene`]: recovers classes and the relation.
pub fn parse_caption(caption: &str) -> Result<ParsedCaption> {
    let tokens: Vec<&str> = caption.split_whitespace().collect();
    let bad = || Error::invalid(format!("caption {caption:?} does not match the grammar"));

    let mention = |at: usize| -> Result<(ColorName, ShapeKind)> {
        if tokens.len() < at + 3 || tokens[at] != "a" {
            return Err(bad());
        }
        Ok((ColorName::parse(tokens[at + 1])?, ShapeKind::parse(tokens[at + 2])?))
    };

    let first = mention(0)?;
    if tokens.len() == 3 {
        return Ok(ParsedCaption { objects: vec![first], relation: None });
    }
    let (relation, rest) = match tokens.get(3..) {
        Some(["to", "the", "left", "of", ..]) => (Relation::LeftOf, 7),
        Some(["to", "the", "right", "of", ..]) => (Relation::RightOf, 7),
        Some(["above", ..]) => (Relation::Above, 4),
        Some(["below", ..]) => (Relation::Below, 4),
        _ => return Err(bad()),
    };
    let second = mention(rest)?;
    if tokens.len() != rest + 3 {
        return Err(bad());
    }
    Ok(ParsedCaption { objects: vec![first, second], relation: Some(relation) })
}

// ── dataset generation ───────────────────────────────────────────────────────

/// One manifest line: where the image lives plus its full ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub caption: String,
    pub objects: Vec<SceneObject>,
    pub relation: Option<Relation>,
}

/// The generated dataset: entries split 90/10 into train/val by index.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub dir: PathBuf,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty()
    }
}

fn image_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Indices with `index % 10 == 9` go to the validation split.
fn is_val(index: usize) -> bool {
    index % 10 == 9
}

fn write_jsonl(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for entry in entries {
        serde_json::to_writer(&mut out, entry)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

fn read_jsonl(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(|line| Ok(serde_json::from_str(line)?))
        .collect()
}

/// Generates `n` scenes under `(seed, index)` streams, renders each to
/// `out_dir/{index:06}.png` and writes `train.jsonl` / `val.jsonl`
/// manifests. Classes equal to `exclude` never appear. Reruns with the
/// same arguments produce byte-identical files.
pub fn generate_dataset(
    n: usize,
    seed: u64,
    out_dir: &Path,
    exclude: Option<(ShapeKind, ColorName)>,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    fs::create_dir_all(out_dir)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for index in 0..n {
        let spec = sample_spec(seed, index as u64, exclude)?;
        let image = render_scene(&spec)?;
        let name = image_name(index);
        image.save(out_dir.join(&name))?;
        let entry = ManifestEntry {
            image: name,
            caption: caption_scene(&spec)?,
            objects: spec.objects.clone(),
            relation: spec.relation(),
        };
        if is_val(index) {
            val.push(entry);
        } else {
            train.push(entry);
        }
    }
    write_jsonl(&out_dir.join("train.jsonl"), &train)?;
    write_jsonl(&out_dir.join("val.jsonl"), &val)?;
    Ok(Manifest { dir: out_dir.to_path_buf(), train, val })
}

/// Reads a dataset directory written by [`generate_dataset`].
pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    Ok(Manifest {
        dir: dir.to_path_buf(),
        train: read_jsonl(&dir.join("train.jsonl"))?,
        val: read_jsonl(&dir.join("val.jsonl"))?,
    })
}

/// Loads manifest entries as training pairs: normalized image tensors plus
/// tokenized captions.
pub fn load_training_pairs(
    dir: &Path,
    entries: &[ManifestEntry],
    vocab: &Vocabulary,
) -> Result<Vec<(Tensor, TokenizedPrompt)>> {
    entries
        .iter()
        .map(|entry| {
            let img = image::open(dir.join(&entry.image))?.to_rgb8();
            Ok((image_to_latent(&img), vocab.tokenize(&entry.caption)?))
        })
        .collect()
}

/// Renders `n` single-object scenes of one class (random placement and
/// background per `(seed, index)` stream) — the example images for
/// concept-inversion experiments on a class held out of training captions.
pub fn render_class_images(
    shape: ShapeKind,
    color: ColorName,
    n: usize,
    seed: u64,
) -> Result<Vec<RgbImage>> {
    (0..n)
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let background = rng.gen_range(BACKGROUND_RANGE.0..=BACKGROUND_RANGE.1);
            let bbox = draw_box(&mut rng, MAX_SHAPE_SIDE);
            let spec = SceneSpec {
                objects: vec![SceneObject { shape, color, bbox }],
                background,
                seed,
                index: index as u64,
            };
            render_scene(&spec)
        })
        .collect()
}
