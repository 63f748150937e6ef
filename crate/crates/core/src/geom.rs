//! Box algebra: areas, overlap measures and greedy non-maximum suppression.
//!
//! Coordinates are continuous with a half-open convention, so a box
//! `(x1, y1, x2, y2)` has area `(x2 - x1) * (y2 - y1)` and no `+1` pixel
//! correction is applied anywhere.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and negative extents.
    /// Zero-area boxes are allowed.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// Converts an `[x, y, w, h]` box with absolute coordinates.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w.is_finite() && h.is_finite()) || w < 0.0 || h < 0.0 {
            return Err(Error::Validation(format!(
                "box [{x}, {y}, {w}, {h}] has a negative or non-finite extent"
            )));
        }
        BBox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation(format!("box {self:?} is not finite")));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::Validation(format!("box {self:?} has a negative extent")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Clamps the box into `[0, width] x [0, height]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox {
            x1: cx(self.x1),
            y1: cy(self.y1),
            x2: cx(self.x2),
            y2: cy(self.y2),
        }
    }
}

/// A box with a confidence for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64, class_id: usize) -> Self {
        ScoredBox { bbox, score, class_id }
    }
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Fraction of `v` covered by `u`: `|u ∩ v| / |v|`, zero for a degenerate `v`.
pub fn containment_ratio(u: &BBox, v: &BBox) -> f64 {
    let area = v.area();
    if area <= 0.0 {
        0.0
    } else {
        (intersection_area(u, v) / area).clamp(0.0, 1.0)
    }
}

/// Descending score, lower original index first on ties.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| desc_score(scores[i], scores[j]).then(i.cmp(&j)));
    order
}

pub(crate) fn desc_score(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Indices kept by greedy NMS, in descending score order.
pub(crate) fn nms_indices(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let order = score_order(scores);
    let mut keep: Vec<usize> = Vec::new();
    for idx in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[idx]) <= iou_threshold) {
            keep.push(idx);
        }
    }
    keep
}

/// Greedy non-maximum suppression. A box is dropped when its IoU with an
/// already kept, higher-ranked box exceeds `iou_threshold`. Class ids are
/// ignored; callers run it per class.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let geometry: Vec<BBox> = boxes.iter().map(|b| b.bbox).collect();
    let scores: Vec<f64> = boxes.iter().map(|b| b.score).collect();
    nms_indices(&geometry, &scores, iou_threshold)
        .into_iter()
        .map(|i| boxes[i])
        .collect()
}
