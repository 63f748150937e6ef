//! Detection evaluation: greedy matching, all-points interpolated AP and
//! mAP at one or more IoU thresholds.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, ImageDetections};
use crate::error::{Error, Result};
use crate::geom::{desc_score, iou, ScoredBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchKind {
    TruePositive,
    FalsePositive,
}

impl MatchKind {
    pub fn is_tp(self) -> bool {
        self == MatchKind::TruePositive
    }
}

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Matches one image's detections of a single class against its ground
/// truth. Detections are visited by descending score (input order on ties);
/// each takes the unmatched ground-truth box of highest IoU if that IoU
/// reaches `iou_threshold`. Results are listed in visiting order.
pub fn match_detections(dets: &[ScoredBox], gts: &[ScoredBox], iou_threshold: f64) -> Result<Vec<(usize, MatchKind)>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }
    let classes: BTreeSet<usize> = dets.iter().chain(gts).map(|b| b.class_id).collect();
    if classes.len() > 1 {
        return Err(Error::InvalidArgument(format!(
            "match_detections needs a single class, got {classes:?}"
        )));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| desc_score(dets[a].score, dets[b].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let o = iou(&dets[d].bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        match best {
            Some((g, o)) if o >= iou_threshold => {
                taken[g] = true;
                out.push((d, MatchKind::TruePositive));
            }
            _ => out.push((d, MatchKind::FalsePositive)),
        }
    }
    Ok(out)
}

/// Area under the monotone precision envelope of a ranked match list.
///
/// Every true positive raises recall by `1 / n_gt`, so the area is the sum
/// of the envelope at true-positive ranks divided by `n_gt`.
pub fn average_precision(ranked: &[MatchKind], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut envelope = Vec::with_capacity(ranked.len());
    for (i, m) in ranked.iter().enumerate() {
        if m.is_tp() {
            tp += 1;
        }
        envelope.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let area: f64 = ranked
        .iter()
        .zip(&envelope)
        .filter(|(m, _)| m.is_tp())
        .fold(0.0, |acc, (_, p)| acc + p);
    area / n_gt as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub name: String,
    pub n_gt: usize,
    /// One entry per evaluated threshold.
    pub ap: Vec<f64>,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    #[serde(rename = "fn")]
    pub fn_: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    /// Classes with at least one ground-truth box.
    pub per_class: Vec<ClassEval>,
    /// mAP per threshold.
    pub map: Vec<f64>,
    pub map50: Option<f64>,
    pub map75: Option<f64>,
    /// Mean over `0.50:0.05:0.95`; present only when all ten were evaluated.
    pub map5095: Option<f64>,
}

impl EvalResult {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-9)
            .map(|i| self.map[i])
    }
}

/// Evaluates detections against per-image ground truth.
///
/// Every detection image must appear in `ground_truth`; ground-truth images
/// without detections count their boxes as misses.
pub fn evaluate(
    detections: &[ImageDetections],
    ground_truth: &[ImageDetections],
    categories: &[String],
    thresholds: &[f64],
) -> Result<EvalResult> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("no IoU thresholds".into()));
    }
    if let Some(t) = thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::InvalidArgument(format!("IoU threshold {t} outside (0, 1]")));
    }
    let n_classes = categories.len();
    let gt_index: HashMap<&str, usize> = ground_truth
        .iter()
        .enumerate()
        .map(|(i, g)| (g.image_id.as_str(), i))
        .collect();
    let mut dets_by_image: Vec<&[ScoredBox]> = vec![&[]; ground_truth.len()];
    for d in detections {
        let &i = gt_index
            .get(d.image_id.as_str())
            .ok_or_else(|| Error::Validation(format!("detections for unknown image {:?}", d.image_id)))?;
        dets_by_image[i] = &d.detections;
    }
    for b in detections
        .iter()
        .flat_map(|d| &d.detections)
        .chain(ground_truth.iter().flat_map(|g| &g.detections))
    {
        if b.class_id >= n_classes {
            return Err(Error::Validation(format!(
                "class_id {} outside {n_classes} categories",
                b.class_id
            )));
        }
    }

    // class -> image -> boxes
    let split = |boxes: &[ScoredBox]| {
        let mut m: BTreeMap<usize, Vec<ScoredBox>> = BTreeMap::new();
        for b in boxes {
            m.entry(b.class_id).or_default().push(*b);
        }
        m
    };
    let gt_split: Vec<_> = ground_truth.iter().map(|g| split(&g.detections)).collect();
    let det_split: Vec<_> = dets_by_image.iter().map(|d| split(d)).collect();

    let mut per_class = Vec::new();
    for class in 0..n_classes {
        let n_gt: usize = gt_split.iter().map(|m| m.get(&class).map_or(0, Vec::len)).sum();
        if n_gt == 0 {
            continue;
        }
        let mut ce = ClassEval {
            class_id: class,
            name: categories[class].clone(),
            n_gt,
            ap: Vec::new(),
            tp: Vec::new(),
            fp: Vec::new(),
            fn_: Vec::new(),
        };
        for &t in thresholds {
            // pool (score, image, visit rank, kind) over images
            let mut pooled: Vec<(f64, usize, usize, MatchKind)> = Vec::new();
            for (img, (g, d)) in gt_split.iter().zip(&det_split).enumerate() {
                let Some(dets) = d.get(&class) else { continue };
                let gts = g.get(&class).map_or(&[][..], Vec::as_slice);
                for (rank, (di, kind)) in match_detections(dets, gts, t)?.into_iter().enumerate() {
                    pooled.push((dets[di].score, img, rank, kind));
                }
            }
            pooled.sort_by(|a, b| desc_score(a.0, b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let ranked: Vec<MatchKind> = pooled.iter().map(|p| p.3).collect();
            let tp = ranked.iter().filter(|m| m.is_tp()).count();
            ce.ap.push(average_precision(&ranked, n_gt));
            ce.tp.push(tp);
            ce.fp.push(ranked.len() - tp);
            ce.fn_.push(n_gt - tp);
        }
        per_class.push(ce);
    }

    let map: Vec<f64> = (0..thresholds.len())
        .map(|ti| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.iter().map(|c| c.ap[ti]).sum::<f64>() / per_class.len() as f64
            }
        })
        .collect();
    let lookup = |want: f64| thresholds.iter().position(|t| (t - want).abs() < 1e-9).map(|i| map[i]);
    let map5095 = coco_thresholds()
        .into_iter()
        .map(lookup)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64);
    Ok(EvalResult {
        thresholds: thresholds.to_vec(),
        map50: lookup(0.5),
        map75: lookup(0.75),
        map5095,
        per_class,
        map,
    })
}

/// Evaluates against a manifest whose `pseudo_gt` holds the ground truth.
pub fn evaluate_manifest(
    detections: &[ImageDetections],
    manifest: &DatasetManifest,
    thresholds: &[f64],
) -> Result<EvalResult> {
    let gt: Vec<ImageDetections> = manifest
        .images
        .iter()
        .map(|im| ImageDetections {
            image_id: im.image_id.clone(),
            detections: im.pseudo_gt().to_vec(),
        })
        .collect();
    evaluate(detections, &gt, &manifest.categories, thresholds)
}
