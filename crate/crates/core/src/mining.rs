//! Seed-box mining from RoI scores.
//!
//! For every active class the proposals are ranked by that class's score,
//! the top fraction `p` is kept, low scorers (`< s_t`) are dropped and an
//! aggressive NMS removes anything overlapping a higher-ranked seed. The
//! per-class results are concatenated without cross-class deduplication.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{nms_indices, score_order, BBox, ScoredBox};
use crate::milhead::ScoreMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    /// Fraction of proposals examined per class.
    pub p: f64,
    /// Minimum seed score.
    pub s_t: f64,
    pub nms_threshold: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            p: 0.1,
            s_t: 0.05,
            nms_threshold: 0.01,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidArgument(format!("p must lie in (0, 1], got {}", self.p)));
        }
        if !(0.0..=1.0).contains(&self.s_t) {
            return Err(Error::InvalidArgument(format!(
                "s_t must lie in [0, 1], got {}",
                self.s_t
            )));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::InvalidArgument(format!(
                "nms_threshold must lie in [0, 1], got {}",
                self.nms_threshold
            )));
        }
        Ok(())
    }

    /// Number of candidates per class: `ceil(n * p)`, at least 1.
    ///
    /// `n * p` is evaluated in floating point, so a product that lands a hair
    /// above an integer (`30 * 0.1 = 3.0000000000000004`) is snapped back.
    pub fn top_count(&self, n: usize) -> usize {
        let raw = n as f64 * self.p;
        let snapped = if (raw - raw.round()).abs() <= 1e-9 * raw.max(1.0) {
            raw.round()
        } else {
            raw.ceil()
        };
        (snapped as usize).clamp(1, n.max(1))
    }
}

pub fn mine_seed_boxes(
    proposals: &[BBox],
    scores: &ScoreMatrix,
    active_labels: &BTreeSet<usize>,
    cfg: &MiningConfig,
) -> Result<Vec<ScoredBox>> {
    cfg.validate()?;
    if proposals.is_empty() {
        return Err(Error::InvalidArgument("no proposals to mine".into()));
    }
    if scores.n_proposals() != proposals.len() {
        return Err(Error::Shape(format!(
            "{} proposals but scores cover {}",
            proposals.len(),
            scores.n_proposals()
        )));
    }
    if let Some(&c) = active_labels.iter().find(|&&c| c >= scores.n_classes()) {
        return Err(Error::InvalidArgument(format!(
            "active label {c} outside {} classes",
            scores.n_classes()
        )));
    }

    let top = cfg.top_count(proposals.len());
    let mut seeds = Vec::new();
    for &class in active_labels {
        let row: Vec<f64> = scores.view().row(class).to_vec();
        let candidates: Vec<usize> = score_order(&row)
            .into_iter()
            .take(top)
            .filter(|&r| row[r] >= cfg.s_t)
            .collect();
        let boxes: Vec<BBox> = candidates.iter().map(|&r| proposals[r]).collect();
        let kept_scores: Vec<f64> = candidates.iter().map(|&r| row[r]).collect();
        for k in nms_indices(&boxes, &kept_scores, cfg.nms_threshold) {
            seeds.push(ScoredBox::new(boxes[k], kept_scores[k], class));
        }
    }
    Ok(seeds)
}
