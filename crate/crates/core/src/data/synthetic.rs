//! Seeded synthetic scenes standing in for a real detection dataset.
//!
//! Each image holds 1–5 objects. Every class has a characteristic size and
//! aspect ratio so that geometry carries some class information. Proposals
//! are the true boxes, jittered copies of them, object parts and random
//! clutter. The RoI score of proposal `r` for class `c` starts from the best
//! IoU between `r` and an object of class `c` (parts get a fixed high score,
//! mimicking a WSOD head that fires on discriminative regions) and is then
//! blended with uniform noise at a per-image level drawn around `noise`.
//! A `noise` fraction of images is part-dominated: there parts outscore the
//! whole object, the typical failure of a MIL detector.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetManifest, ImageDetections, ImageRecord, ScoredBoxSet};
use crate::error::{Error, Result};
use crate::geom::{iou, BBox, ScoredBox};
use crate::milhead::ScoreMatrix;

const JITTERS_PER_OBJECT: usize = 8;
const PARTS_PER_OBJECT: usize = 2;
const CLUTTER: usize = 16;
const PART_SCORE: f64 = 0.7;
const DOMINANT_PART_SCORE: f64 = 1.0;
const DOMINATED_OBJECT_SCALE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// Images with proposals and image-level labels, no boxes.
    pub manifest: DatasetManifest,
    /// True objects per image, score 1. For evaluation only.
    pub ground_truth: Vec<ImageDetections>,
    /// RoI scores per image, aligned with the manifest's proposals.
    pub scores: Vec<ScoredBoxSet>,
}

impl SyntheticDataset {
    /// The manifest with the true boxes stored as `pseudo_gt`.
    pub fn ground_truth_manifest(&self) -> DatasetManifest {
        let mut m = self.manifest.clone();
        for (im, gt) in m.images.iter_mut().zip(&self.ground_truth) {
            im.pseudo_gt = Some(gt.detections.clone());
        }
        m
    }
}

struct ClassShape {
    aspect: f64,
    scale: f64,
}

fn class_shapes(n_classes: usize) -> Vec<ClassShape> {
    (0..n_classes)
        .map(|c| {
            let t = if n_classes > 1 {
                c as f64 / (n_classes - 1) as f64
            } else {
                0.5
            };
            let spread = (0.5 + c as f64 * 0.618_034).fract();
            ClassShape {
                aspect: (-0.6 + 1.2 * t).exp(),
                scale: 0.12 + 0.25 * spread,
            }
        })
        .collect()
}

/// Integer-aligned box of at least 2x2 inside the image.
fn snap(x1: f64, y1: f64, x2: f64, y2: f64, width: f64, height: f64) -> BBox {
    let mut x1 = x1.round().clamp(0.0, width - 2.0);
    let mut y1 = y1.round().clamp(0.0, height - 2.0);
    let mut x2 = x2.round().clamp(0.0, width);
    let mut y2 = y2.round().clamp(0.0, height);
    if x2 - x1 < 2.0 {
        x2 = (x1 + 2.0).min(width);
        x1 = x2 - 2.0;
    }
    if y2 - y1 < 2.0 {
        y2 = (y1 + 2.0).min(height);
        y1 = y2 - 2.0;
    }
    BBox { x1, y1, x2, y2 }
}

fn from_center(cx: f64, cy: f64, w: f64, h: f64, width: f64, height: f64) -> BBox {
    snap(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h, width, height)
}

enum Origin {
    Object,
    Part(usize),
    Other,
}

pub fn generate_synthetic_dataset(
    seed: u64,
    n_images: usize,
    n_classes: usize,
    noise: f64,
) -> Result<SyntheticDataset> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be at least 1".into()));
    }
    if n_classes == 0 {
        return Err(Error::InvalidArgument("n_classes must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::InvalidArgument(format!("noise must lie in [0, 1], got {noise}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit: Normal<f64> = Normal::new(0.0, 1.0).expect("valid normal");
    let shapes = class_shapes(n_classes);
    let categories: Vec<String> = (0..n_classes).map(|c| format!("class_{c}")).collect();

    let mut images = Vec::with_capacity(n_images);
    let mut ground_truth = Vec::with_capacity(n_images);
    let mut scores = Vec::with_capacity(n_images);

    for i in 0..n_images {
        let image_id = format!("img{i:05}");
        let width = rng.random_range(320..=640) as f64;
        let height = rng.random_range(320..=640) as f64;
        let side = (width * height).sqrt();

        let n_obj = rng.random_range(1..=5);
        let mut objects: Vec<ScoredBox> = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let class = rng.random_range(0..n_classes);
            let shape = &shapes[class];
            let s = shape.scale * (0.15 * unit.sample(&mut rng)).exp() * side;
            let a = shape.aspect * (0.15 * unit.sample(&mut rng)).exp();
            let w = (s * a.sqrt()).min(0.9 * width);
            let h = (s / a.sqrt()).min(0.9 * height);
            let x = rng.random_range(0.0..(width - w));
            let y = rng.random_range(0.0..(height - h));
            objects.push(ScoredBox::new(snap(x, y, x + w, y + h, width, height), 1.0, class));
        }

        let mut proposals: Vec<(BBox, Origin)> = Vec::new();
        for (o, obj) in objects.iter().enumerate() {
            let b = obj.bbox;
            let (cx, cy) = b.center();
            let (w, h) = (b.width(), b.height());
            proposals.push((b, Origin::Object));
            for _ in 0..JITTERS_PER_OBJECT {
                let sigma = rng.random_range(0.05..0.3);
                let jx = cx + sigma * unit.sample(&mut rng) * w;
                let jy = cy + sigma * unit.sample(&mut rng) * h;
                let jw = w * (sigma * unit.sample(&mut rng)).exp();
                let jh = h * (sigma * unit.sample(&mut rng)).exp();
                proposals.push((from_center(jx, jy, jw, jh, width, height), Origin::Object));
            }
            for _ in 0..PARTS_PER_OBJECT {
                let pw = w * rng.random_range(0.3..0.6);
                let ph = h * rng.random_range(0.3..0.6);
                let px = b.x1 + rng.random_range(0.0..(w - pw));
                let py = b.y1 + rng.random_range(0.0..(h - ph));
                proposals.push((snap(px, py, px + pw, py + ph, width, height), Origin::Part(o)));
            }
        }
        for _ in 0..CLUTTER {
            let s = rng.random_range(0.05..0.6) * side;
            let a = rng.random_range(-1.0f64..1.0).exp();
            let w = (s * a.sqrt()).min(width);
            let h = (s / a.sqrt()).min(height);
            let x = rng.random_range(0.0..=(width - w));
            let y = rng.random_range(0.0..=(height - h));
            proposals.push((snap(x, y, x + w, y + h, width, height), Origin::Other));
        }
        proposals.shuffle(&mut rng);

        let eta = (noise * 2.0 * rng.random::<f64>()).min(1.0);
        let part_dominant = rng.random::<f64>() < noise;
        let (part_score, object_scale) = if part_dominant {
            (DOMINANT_PART_SCORE, DOMINATED_OBJECT_SCALE)
        } else {
            (PART_SCORE, 1.0)
        };
        let n = proposals.len();
        let mut s = Array2::zeros((n_classes, n));
        for (r, (p, origin)) in proposals.iter().enumerate() {
            for c in 0..n_classes {
                let mut base = objects
                    .iter()
                    .filter(|o| o.class_id == c)
                    .map(|o| iou(p, &o.bbox))
                    .fold(0.0, f64::max)
                    * object_scale;
                if let Origin::Part(o) = origin {
                    if objects[*o].class_id == c {
                        base = base.max(part_score);
                    }
                }
                let u: f64 = rng.random();
                s[[c, r]] = ((1.0 - eta) * base + eta * u).clamp(0.0, 1.0);
            }
        }

        let boxes: Vec<BBox> = proposals.into_iter().map(|(b, _)| b).collect();
        let active_labels: BTreeSet<usize> = objects.iter().map(|o| o.class_id).collect();
        images.push(ImageRecord {
            image_id: image_id.clone(),
            width,
            height,
            active_labels,
            proposals: Some(boxes.clone()),
            pseudo_gt: None,
            split: None,
        });
        ground_truth.push(ImageDetections {
            image_id: image_id.clone(),
            detections: objects,
        });
        scores.push(ScoredBoxSet {
            image_id,
            proposals: boxes,
            scores: ScoreMatrix::new(s)?,
        });
    }

    Ok(SyntheticDataset {
        manifest: DatasetManifest { categories, images },
        ground_truth,
        scores,
    })
}
