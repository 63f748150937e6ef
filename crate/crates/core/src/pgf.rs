//! Pseudo-groundtruth filtering of stage-one detections.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{containment_ratio, score_order, ScoredBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgfConfig {
    /// Boxes scoring below this are dropped (the class's top box excepted).
    pub t_keep: f64,
    /// Classes whose top box scores below this emit nothing.
    pub t_top: f64,
    /// A box covered by another one beyond this fraction is removed.
    pub t_con: f64,
}

impl PgfConfig {
    pub const VOC: PgfConfig = PgfConfig {
        t_keep: 0.2,
        t_top: 0.0,
        t_con: 0.85,
    };

    pub const COCO: PgfConfig = PgfConfig {
        t_keep: 0.4,
        t_top: 0.1,
        t_con: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t_keep", self.t_keep), ("t_top", self.t_top), ("t_con", self.t_con)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for PgfConfig {
    fn default() -> Self {
        PgfConfig::VOC
    }
}

/// Filters one image's detections into pseudo boxes.
///
/// Per active class: skip the class if its best score is below `t_top`;
/// otherwise keep the best box plus every box scoring at least `t_keep`.
/// Then, visiting candidates from the lowest score upward, drop a box when
/// some other still-present box covers more than `t_con` of it. Survivors
/// are emitted in descending score order, classes in ascending id order.
pub fn pgf_filter(
    detections: &[ScoredBox],
    active_labels: &BTreeSet<usize>,
    n_classes: usize,
    cfg: &PgfConfig,
) -> Result<Vec<ScoredBox>> {
    cfg.validate()?;
    if let Some(&c) = active_labels.iter().find(|&&c| c >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "active label {c} outside {n_classes} classes"
        )));
    }
    if let Some(d) = detections.iter().find(|d| d.class_id >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "detection class {} outside {n_classes} classes",
            d.class_id
        )));
    }

    let mut out = Vec::new();
    for &class in active_labels {
        let of_class: Vec<&ScoredBox> = detections.iter().filter(|d| d.class_id == class).collect();
        let scores: Vec<f64> = of_class.iter().map(|d| d.score).collect();
        let order = score_order(&scores);
        let Some(&top) = order.first() else { continue };
        if scores[top] < cfg.t_top {
            continue;
        }
        // `order` is descending; the top box is position 0 and kept unconditionally
        let candidates: Vec<usize> = order
            .iter()
            .copied()
            .enumerate()
            .filter(|&(rank, i)| rank == 0 || scores[i] >= cfg.t_keep)
            .map(|(_, i)| i)
            .collect();

        let mut alive = vec![true; candidates.len()];
        for vi in (0..candidates.len()).rev() {
            let v = &of_class[candidates[vi]].bbox;
            let covered = (0..candidates.len())
                .any(|ui| ui != vi && alive[ui] && containment_ratio(&of_class[candidates[ui]].bbox, v) > cfg.t_con);
            if covered {
                alive[vi] = false;
            }
        }
        out.extend(
            candidates
                .iter()
                .zip(&alive)
                .filter(|(_, &keep)| keep)
                .map(|(&i, _)| *of_class[i]),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BBox;

    fn sb(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class: usize) -> ScoredBox {
        ScoredBox::new(BBox::new(x1, y1, x2, y2).unwrap(), score, class)
    }

    #[test]
    fn skips_class_with_unconfident_top() {
        let dets = [sb(0.0, 0.0, 10.0, 10.0, 0.05, 0), sb(20.0, 0.0, 30.0, 10.0, 0.5, 1)];
        let out = pgf_filter(&dets, &BTreeSet::from([0, 1]), 2, &PgfConfig::COCO).unwrap();
        assert_eq!(out, vec![dets[1]]);
    }

    #[test]
    fn t_con_one_never_removes() {
        let dets = [
            sb(0.0, 0.0, 100.0, 100.0, 0.9, 0),
            sb(10.0, 10.0, 30.0, 30.0, 0.8, 0),
            sb(10.0, 10.0, 30.0, 30.0, 0.7, 0),
        ];
        let cfg = PgfConfig {
            t_keep: 0.2,
            t_top: 0.0,
            t_con: 1.0,
        };
        let out = pgf_filter(&dets, &BTreeSet::from([0]), 1, &cfg).unwrap();
        assert_eq!(out, dets.to_vec());
    }

    #[test]
    fn contained_box_removed() {
        let u = sb(0.0, 0.0, 100.0, 100.0, 0.9, 0);
        let v = sb(10.0, 10.0, 30.0, 30.0, 0.5, 0);
        let out = pgf_filter(&[v, u], &BTreeSet::from([0]), 1, &PgfConfig::VOC).unwrap();
        assert_eq!(out, vec![u]);
    }

    #[test]
    fn contained_top_box_gives_way_to_enclosing_box() {
        // a confident part inside a less confident whole object
        let part = sb(10.0, 10.0, 30.0, 30.0, 0.9, 0);
        let whole = sb(0.0, 0.0, 100.0, 100.0, 0.4, 0);
        let out = pgf_filter(&[part, whole], &BTreeSet::from([0]), 1, &PgfConfig::VOC).unwrap();
        assert_eq!(out, vec![whole]);
    }

    #[test]
    fn duplicates_keep_higher_score() {
        let a = sb(0.0, 0.0, 10.0, 10.0, 0.3, 0);
        let b = sb(0.0, 0.0, 10.0, 10.0, 0.6, 0);
        let out = pgf_filter(&[a, b], &BTreeSet::from([0]), 1, &PgfConfig::VOC).unwrap();
        assert_eq!(out, vec![b]);
    }

    #[test]
    fn top_box_kept_below_t_keep_and_inactive_classes_ignored() {
        let dets = [
            sb(0.0, 0.0, 10.0, 10.0, 0.15, 0),
            sb(50.0, 0.0, 60.0, 10.0, 0.1, 0),
            sb(0.0, 0.0, 10.0, 10.0, 0.9, 1),
        ];
        let out = pgf_filter(&dets, &BTreeSet::from([0]), 2, &PgfConfig::VOC).unwrap();
        assert_eq!(out, vec![dets[0]]);
    }

    #[test]
    fn label_out_of_range() {
        let dets = [sb(0.0, 0.0, 1.0, 1.0, 0.5, 4)];
        assert!(pgf_filter(&dets, &BTreeSet::from([0]), 2, &PgfConfig::VOC).is_err());
        assert!(pgf_filter(&[], &BTreeSet::from([3]), 2, &PgfConfig::VOC).is_err());
    }
}
