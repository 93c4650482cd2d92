//! Region (J), contour (F) and overall (G) accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelMask;

fn check_dims(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Intersection over union of one object's masks; 1 when both are empty.
pub fn region_accuracy(pred: &LabelMask, gt: &LabelMask, object_id: u8) -> Result<f64> {
    check_dims(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p == object_id, g == object_id);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Object pixels with a 4-neighbour outside the object or on the image border.
pub fn boundary(mask: &LabelMask, object_id: u8) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let inside = |y: usize, x: usize| mask.get(y, x) == object_id;
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !inside(y, x) {
                continue;
            }
            out[y * w + x] = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !inside(y - 1, x)
                || !inside(y + 1, x)
                || !inside(y, x - 1)
                || !inside(y, x + 1);
        }
    }
    out
}

/// Fraction of `from` boundary pixels within `tol` (Euclidean) of a `to` boundary pixel.
fn matched_fraction(from: &[bool], to: &[bool], h: usize, w: usize, tol: f64) -> Option<f64> {
    let r = tol.floor().max(0.0) as usize;
    let tol2 = tol * tol;
    let (mut total, mut hit) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !from[y * w + x] {
                continue;
            }
            total += 1;
            let found = (y.saturating_sub(r)..=(y + r).min(h - 1)).any(|yy| {
                (x.saturating_sub(r)..=(x + r).min(w - 1)).any(|xx| {
                    let (dy, dx) = (yy as f64 - y as f64, xx as f64 - x as f64);
                    to[yy * w + xx] && dy * dy + dx * dx <= tol2
                })
            });
            hit += usize::from(found);
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Boundary F-measure with a pixel tolerance; 1 when both boundaries are empty.
pub fn contour_accuracy(pred: &LabelMask, gt: &LabelMask, object_id: u8, tolerance_px: f64) -> Result<f64> {
    check_dims(pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    let bp = boundary(pred, object_id);
    let bg = boundary(gt, object_id);
    let precision = matched_fraction(&bp, &bg, h, w, tolerance_px);
    let recall = matched_fraction(&bg, &bp, h, w, tolerance_px);
    Ok(match (precision, recall) {
        (None, None) => 1.0,
        (Some(p), Some(r)) if p + r > 0.0 => 2.0 * p * r / (p + r),
        _ => 0.0,
    })
}

pub fn overall_accuracy(j: f64, f: f64) -> f64 {
    (j + f) / 2.0
}

/// `ceil(0.008 * diagonal)` pixels.
pub fn default_tolerance(height: usize, width: usize) -> f64 {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "G")]
    pub g: f64,
}

impl Scores {
    pub fn new(j: f64, f: f64) -> Self {
        Self {
            j,
            f,
            g: overall_accuracy(j, f),
        }
    }

    fn mean(items: impl IntoIterator<Item = Scores>) -> Scores {
        let (mut j, mut f, mut n) = (0.0, 0.0, 0usize);
        for s in items {
            j += s.j;
            f += s.f;
            n += 1;
        }
        if n == 0 {
            Scores::new(1.0, 1.0)
        } else {
            Scores::new(j / n as f64, f / n as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub id: u8,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    #[serde(flatten)]
    pub scores: Scores,
    pub objects: Vec<ObjectMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_sequence: Vec<SequenceMetrics>,
    pub mean: Scores,
}

impl MetricsReport {
    pub fn new(per_sequence: Vec<SequenceMetrics>) -> Self {
        let mean = Scores::mean(per_sequence.iter().map(|s| s.scores));
        Self { per_sequence, mean }
    }
}

/// Scores a predicted mask sequence against ground truth.
///
/// Objects are the ids present anywhere in the ground truth. Frame 0 is the given
/// annotation and is skipped unless it is the only frame. Per-object scores are
/// frame means; the sequence score is the mean over objects.
pub fn evaluate_sequence(
    name: &str,
    pred: &[LabelMask],
    gt: &[LabelMask],
    tolerance_px: Option<f64>,
) -> Result<SequenceMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "sequence {name}: {} predicted masks but {} ground-truth masks",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::InvalidInput(format!("sequence {name} has no masks")));
    }
    let frames = if gt.len() > 1 { 1..gt.len() } else { 0..1 };
    let ids: std::collections::BTreeSet<u8> = gt.iter().flat_map(LabelMask::object_ids).collect();
    let mut objects = Vec::new();
    for id in ids {
        let mut per_frame = Vec::new();
        for t in frames.clone() {
            let tol = tolerance_px.unwrap_or_else(|| default_tolerance(gt[t].height(), gt[t].width()));
            let j = region_accuracy(&pred[t], &gt[t], id)?;
            let f = contour_accuracy(&pred[t], &gt[t], id, tol)?;
            per_frame.push(Scores::new(j, f));
        }
        objects.push(ObjectMetrics {
            id,
            scores: Scores::mean(per_frame),
        });
    }
    Ok(SequenceMetrics {
        name: name.to_string(),
        scores: Scores::mean(objects.iter().map(|o| o.scores)),
        objects,
    })
}
