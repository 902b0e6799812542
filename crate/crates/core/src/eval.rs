//! Oracle detector and spatial-fidelity metrics.
//!
//! Generated images are scored without any learned detector: pixels are
//! quantized to the nearest of the four object colors or the background,
//! 4-connected components become detections, and the fill ratio of each
//! component's bounding box classifies the shape (a square fills its box
//! completely, a circle π/4 of it, a triangle half). On top of the
//! detector sit the spatial metrics: object accuracy (both prompted
//! objects present), VISOR (relation correctness, unconditional and
//! conditional on object accuracy), and average precision at an IoU
//! threshold against target boxes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ColorName, Relation, SceneObject, ShapeKind, BACKGROUND_RGB};
use crate::error::{Error, Result};
use crate::guidance::BBox;

/// Components below this pixel count are noise, not detections.
pub const MIN_COMPONENT_AREA: usize = 12;
/// Fill-ratio cut above which a component is a square (analytic ratio 1).
pub const SQUARE_MIN_FILL: f64 = 0.9;
/// Fill-ratio cut above which a component is a circle (analytic ratio π/4).
pub const CIRCLE_MIN_FILL: f64 = 0.65;
/// Fill-ratio cut above which a component is a triangle (analytic ratio ~1/2).
pub const TRIANGLE_MIN_FILL: f64 = 0.35;
/// Default IoU matching threshold for average precision.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;

/// Canonical report key for a (shape, color) class, e.g. `"red circle"`.
pub fn class_name(shape: ShapeKind, color: ColorName) -> String {
    format!("{color} {shape}")
}

// ── detector ─────────────────────────────────────────────────────────────────

/// One detected object: class label, normalized bounding box, and a
/// confidence score (the component's bounding-box fill ratio).
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub label: (ShapeKind, ColorName),
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn class_name(&self) -> String {
        class_name(self.label.0, self.label.1)
    }

    pub fn centroid(&self) -> (f64, f64) {
        (
            0.5 * (self.bbox.x0 + self.bbox.x1),
            0.5 * (self.bbox.y0 + self.bbox.y1),
        )
    }
}

fn quantize(px: &image::Rgb<u8>) -> Option<ColorName> {
    let dist = |reference: [u8; 3]| -> u32 {
        (0..3)
            .map(|c| {
                let d = px[c] as i32 - reference[c] as i32;
                (d * d) as u32
            })
            .sum()
    };
    let mut best = (dist(BACKGROUND_RGB), None);
    for color in ColorName::ALL {
        let d = dist(color.rgb());
        if d < best.0 {
            best = (d, Some(color));
        }
    }
    best.1
}

fn classify_fill(fill: f64) -> Option<ShapeKind> {
    if fill >= SQUARE_MIN_FILL {
        Some(ShapeKind::Square)
    } else if fill >= CIRCLE_MIN_FILL {
        Some(ShapeKind::Circle)
    } else if fill >= TRIANGLE_MIN_FILL {
        Some(ShapeKind::Triangle)
    } else {
        None
    }
}

/// Finds every object in the image. Each pixel is snapped to the nearest
/// of red, green, blue, yellow, or background; 4-connected components of
/// at least [`MIN_COMPONENT_AREA`] pixels per color become detections
/// with the fill-ratio shape label. Returns an empty list for images with
/// no foreground components.
pub fn detect(image: &RgbImage) -> Vec<Detection> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let mut labels = vec![None; w * h];
    for y in 0..h {
        for x in 0..w {
            labels[y * w + x] = quantize(image.get_pixel(x as u32, y as u32));
        }
    }

    let mut visited = vec![false; w * h];
    let mut detections = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        let Some(color) = labels[start] else { continue };
        if visited[start] {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let (mut area, mut x0, mut y0, mut x1, mut y1) = (0usize, w, h, 0usize, 0usize);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |j: usize| {
                if !visited[j] && labels[j] == Some(color) {
                    visited[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if area < MIN_COMPONENT_AREA {
            continue;
        }
        let box_area = ((x1 + 1 - x0) * (y1 + 1 - y0)) as f64;
        let fill = (area as f64 / box_area).min(1.0);
        let Some(shape) = classify_fill(fill) else { continue };
        let bbox = BBox::new(
            x0 as f64 / w as f64,
            y0 as f64 / h as f64,
            (x1 + 1) as f64 / w as f64,
            (y1 + 1) as f64 / h as f64,
        )
        .expect("component boxes are valid by construction");
        detections.push(Detection { label: (shape, color), bbox, score: fill });
    }
    detections
}

// ── IoU and average precision ────────────────────────────────────────────────

/// Intersection-over-union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.width() * a.height() + b.width() * b.height() - inter;
    inter / union
}

/// Average-precision results: one AP per class that has ground truth,
/// and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub per_class: BTreeMap<String, f64>,
    pub map: f64,
}

/// AP for one class given detections and ground truths tagged with their
/// image index. Detections are taken in descending score order (ties keep
/// input order) and greedily matched to the best remaining same-image
/// ground truth at or above the IoU threshold; one precision-recall point
/// is emitted per distinct score, and AP is the area under the monotone
/// precision envelope.
fn class_ap(dets: &[(usize, f64, BBox)], gts: &[(usize, BBox)], threshold: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).expect("scores are finite"));

    let mut matched = vec![false; gts.len()];
    let mut points: Vec<(usize, usize)> = Vec::new(); // cumulative (tp, fp)
    let (mut tp, mut fp) = (0usize, 0usize);
    for (rank, &d) in order.iter().enumerate() {
        let (image, score, ref dbox) = dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, &(gt_image, ref gbox)) in gts.iter().enumerate() {
            if gt_image != image || matched[g] {
                continue;
            }
            let overlap = iou(dbox, gbox);
            if overlap >= threshold && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        match best {
            Some((g, _)) => {
                matched[g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        let next_score = order.get(rank + 1).map(|&n| dets[n].1);
        if next_score != Some(score) {
            points.push((tp, fp));
        }
    }

    let n_gt = gts.len() as f64;
    let recalls: Vec<f64> = points.iter().map(|&(t, _)| t as f64 / n_gt).collect();
    let precisions: Vec<f64> = points
        .iter()
        .map(|&(t, f)| t as f64 / (t + f) as f64)
        .collect();
    let mut envelope = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(precisions[i]);
        envelope[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        ap += (recalls[i] - prev_recall) * envelope[i];
        prev_recall = recalls[i];
    }
    ap
}

/// Average precision over an evaluation set: each element pairs one
/// image's detections with its ground-truth objects. Classes are scored
/// independently; the mean runs over classes with at least one ground
/// truth. The IoU threshold must lie in (0, 1].
pub fn average_precision(
    images: &[(Vec<Detection>, Vec<SceneObject>)],
    iou_threshold: f64,
) -> Result<ApReport> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "IoU threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }
    let mut per_class = BTreeMap::new();
    for shape in ShapeKind::ALL {
        for color in ColorName::ALL {
            let gts: Vec<(usize, BBox)> = images
                .iter()
                .enumerate()
                .flat_map(|(i, (_, objects))| {
                    objects
                        .iter()
                        .filter(|o| o.shape == shape && o.color == color)
                        .map(move |o| (i, o.bbox))
                })
                .collect();
            if gts.is_empty() {
                continue;
            }
            let dets: Vec<(usize, f64, BBox)> = images
                .iter()
                .enumerate()
                .flat_map(|(i, (detections, _))| {
                    detections
                        .iter()
                        .filter(|d| d.label == (shape, color))
                        .map(move |d| (i, d.score, d.bbox))
                })
                .collect();
            per_class.insert(
                class_name(shape, color),
                class_ap(&dets, &gts, iou_threshold),
            );
        }
    }
    if per_class.is_empty() {
        return Err(Error::invalid(
            "average precision needs at least one ground-truth object",
        ));
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(ApReport { per_class, map })
}

// ── VISOR ────────────────────────────────────────────────────────────────────

/// One evaluation sample: a generated image, the two prompted objects
/// with their target boxes, and the prompted relation of the first
/// relative to the second.
#[derive(Debug, Clone)]
pub struct VisorSample {
    pub image: RgbImage,
    pub subject: SceneObject,
    pub object: SceneObject,
    pub relation: Relation,
}

/// The aggregate evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of samples where both prompted objects were detected.
    pub oa: f64,
    /// Fraction of samples with the relation satisfied (misses count).
    pub visor_uncond: f64,
    /// Relation accuracy among samples passing object accuracy; absent
    /// when no sample passed.
    pub visor_cond: Option<f64>,
    /// Per-class average precision against the target boxes.
    pub ap: BTreeMap<String, f64>,
    /// Mean of `ap` over classes with ground truth.
    pub map: f64,
    /// Sample count.
    pub n: usize,
}

impl MetricsReport {
    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let mut row = |name: &str, value: String| {
            let _ = writeln!(out, "{name:<24} {value}");
        };
        row("samples", format!("{}", self.n));
        row("object accuracy", format!("{:.4}", self.oa));
        row("VISOR (uncond)", format!("{:.4}", self.visor_uncond));
        match self.visor_cond {
            Some(v) => row("VISOR (cond)", format!("{v:.4}")),
            None => row("VISOR (cond)", "undefined (no OA hits)".to_string()),
        }
        row("mAP@0.3", format!("{:.4}", self.map));
        for (class, ap) in &self.ap {
            row(&format!("AP {class}"), format!("{ap:.4}"));
        }
        out
    }
}

fn relation_satisfied(relation: Relation, subject: (f64, f64), object: (f64, f64)) -> bool {
    match relation {
        Relation::LeftOf => subject.0 < object.0,
        Relation::RightOf => subject.0 > object.0,
        Relation::Above => subject.1 < object.1,
        Relation::Below => subject.1 > object.1,
    }
}

/// Highest-score detection of the given class; score ties keep the first
/// in detection order.
fn best_of_class(detections: &[Detection], class: (ShapeKind, ColorName)) -> Option<&Detection> {
    detections
        .iter()
        .filter(|d| d.label == class)
        .fold(None, |best: Option<&Detection>, d| match best {
            Some(b) if b.score >= d.score => Some(b),
            _ => Some(d),
        })
}

/// Scores a generated evaluation set. Per sample: object accuracy (OA)
/// holds when both prompted classes are detected (highest score per
/// class); the relation holds when OA holds and the chosen detections'
/// centroids satisfy the prompted relation — horizontal relations compare
/// x, vertical compare y. Also reports AP of all detections against the
/// samples' target boxes at IoU [`DEFAULT_IOU_THRESHOLD`].
pub fn visor_evaluate(samples: &[VisorSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    for s in samples {
        if (s.subject.shape, s.subject.color) == (s.object.shape, s.object.color) {
            return Err(Error::invalid(format!(
                "prompt objects must be distinct classes, both are {}",
                class_name(s.subject.shape, s.subject.color)
            )));
        }
    }

    let mut oa_hits = 0usize;
    let mut relation_hits = 0usize;
    let mut ap_inputs = Vec::with_capacity(samples.len());
    for s in samples {
        let detections = detect(&s.image);
        let subject = best_of_class(&detections, (s.subject.shape, s.subject.color));
        let object = best_of_class(&detections, (s.object.shape, s.object.color));
        if let (Some(subject), Some(object)) = (subject, object) {
            oa_hits += 1;
            if relation_satisfied(s.relation, subject.centroid(), object.centroid()) {
                relation_hits += 1;
            }
        }
        ap_inputs.push((detections, vec![s.subject, s.object]));
    }

    let ap = average_precision(&ap_inputs, DEFAULT_IOU_THRESHOLD)?;
    let n = samples.len();
    Ok(MetricsReport {
        oa: oa_hits as f64 / n as f64,
        visor_uncond: relation_hits as f64 / n as f64,
        visor_cond: (oa_hits > 0).then(|| relation_hits as f64 / oa_hits as f64),
        ap: ap.per_class,
        map: ap.map,
        n,
    })
}

// ── split-canvas protocol ────────────────────────────────────────────────────

/// Target boxes for the split-canvas protocol: (subject half, object
/// half) of the canvas, split vertically for horizontal relations and
/// horizontally for vertical ones.
pub fn split_canvas_boxes(relation: Relation) -> (BBox, BBox) {
    let make = |x0: f64, y0: f64, x1: f64, y1: f64| {
        BBox::new(x0, y0, x1, y1).expect("canvas halves are valid")
    };
    let left = make(0.0, 0.0, 0.5, 1.0);
    let right = make(0.5, 0.0, 1.0, 1.0);
    let top = make(0.0, 0.0, 1.0, 0.5);
    let bottom = make(0.0, 0.5, 1.0, 1.0);
    match relation {
        Relation::LeftOf => (left, right),
        Relation::RightOf => (right, left),
        Relation::Above => (top, bottom),
        Relation::Below => (bottom, top),
    }
}

/// One two-object evaluation prompt: classes, relation, and the derived
/// caption/layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisorPrompt {
    pub subject: (ShapeKind, ColorName),
    pub object: (ShapeKind, ColorName),
    pub relation: Relation,
}

impl VisorPrompt {
    /// Caption in the dataset grammar, e.g.
    /// `"a red circle to the left of a blue square"`.
    pub fn caption(&self) -> String {
        format!(
            "a {} {} {} a {} {}",
            self.subject.1,
            self.subject.0,
            self.relation.phrase(),
            self.object.1,
            self.object.0
        )
    }

    /// The prompt's target objects under the split-canvas protocol.
    pub fn layout(&self) -> [SceneObject; 2] {
        let (subject_box, object_box) = split_canvas_boxes(self.relation);
        [
            SceneObject { shape: self.subject.0, color: self.subject.1, bbox: subject_box },
            SceneObject { shape: self.object.0, color: self.object.1, bbox: object_box },
        ]
    }
}

/// Samples `n` evaluation prompts: two distinct classes (never `exclude`)
/// and a uniform relation, deterministically from `(seed, index)` streams.
pub fn sample_visor_prompts(
    n: usize,
    seed: u64,
    exclude: Option<(ShapeKind, ColorName)>,
) -> Result<Vec<VisorPrompt>> {
    if n == 0 {
        return Err(Error::invalid("prompt count must be at least 1"));
    }
    (0..n)
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let draw = |rng: &mut ChaCha8Rng| loop {
                let class = (
                    ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())],
                    ColorName::ALL[rng.gen_range(0..ColorName::ALL.len())],
                );
                if Some(class) != exclude {
                    return class;
                }
            };
            let subject = draw(&mut rng);
            let object = loop {
                let class = draw(&mut rng);
                if class != subject {
                    break class;
                }
            };
            let relation = Relation::ALL[rng.gen_range(0..Relation::ALL.len())];
            Ok(VisorPrompt { subject, object, relation })
        })
        .collect()
}
