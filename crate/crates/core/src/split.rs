//! Clean/noisy split of pseudo-labelled training images.
//!
//! Each image is scored by the mean, over its foreground RoIs, of the four
//! detector loss terms; background RoIs are ignored. The `k` images with the
//! smallest score become the labeled subset.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{parse_jsonl, DatasetManifest, SplitTag};
use crate::error::{Error, Result};

/// Loss terms of one RoI as reported by a detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiLoss {
    pub is_foreground: bool,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
}

impl RoiLoss {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rpn_cls", self.rpn_cls),
            ("rpn_reg", self.rpn_reg),
            ("roi_cls", self.roi_cls),
            ("roi_reg", self.roi_reg),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// All RoIs of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiLossBreakdown {
    pub image_id: String,
    pub rois: Vec<RoiLoss>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLossRecord {
    pub image_id: String,
    /// `+inf` when the image has no foreground RoI.
    #[serde(with = "inf_as_null")]
    pub loss: f64,
    pub n_pos: usize,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

pub fn split_loss_image(b: &RoiLossBreakdown) -> Result<SplitLossRecord> {
    let mut sum = 0.0;
    let mut n_pos = 0;
    for roi in &b.rois {
        roi.validate()?;
        if roi.is_foreground {
            sum += roi.total();
            n_pos += 1;
        }
    }
    let loss = if n_pos == 0 { f64::INFINITY } else { sum / n_pos as f64 };
    Ok(SplitLossRecord {
        image_id: b.image_id.clone(),
        loss,
        n_pos,
    })
}

fn rank(a: &SplitLossRecord, b: &SplitLossRecord) -> Ordering {
    a.loss.total_cmp(&b.loss).then_with(|| a.image_id.cmp(&b.image_id))
}

/// Ranks records by ascending loss (ties by image id) and labels the first `k`.
/// Both returned id lists follow that ranking.
pub fn partition_dataset(records: &[SplitLossRecord], k: usize) -> Result<(Vec<String>, Vec<String>)> {
    if k > records.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} available images",
            records.len()
        )));
    }
    if let Some(r) = records.iter().find(|r| r.loss.is_nan() || r.loss < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split loss of {:?} is {}",
            r.image_id, r.loss
        )));
    }
    let mut sorted: Vec<&SplitLossRecord> = records.iter().collect();
    sorted.sort_by(|a, b| rank(a, b));
    let ids = |rs: &[&SplitLossRecord]| rs.iter().map(|r| r.image_id.clone()).collect::<Vec<_>>();
    Ok((ids(&sorted[..k]), ids(&sorted[k..])))
}

/// Tags every manifest image with its split. Images missing from both lists
/// are an error.
pub fn apply_split(manifest: &DatasetManifest, labeled: &[String], unlabeled: &[String]) -> Result<DatasetManifest> {
    use std::collections::HashMap;
    let tags: HashMap<&str, SplitTag> = labeled
        .iter()
        .map(|id| (id.as_str(), SplitTag::Labeled))
        .chain(unlabeled.iter().map(|id| (id.as_str(), SplitTag::Unlabeled)))
        .collect();
    let mut out = manifest.clone();
    for im in &mut out.images {
        let tag = tags
            .get(im.image_id.as_str())
            .ok_or_else(|| Error::Validation(format!("no split loss for image {:?}", im.image_id)))?;
        im.split = Some(*tag);
    }
    Ok(out)
}

pub fn parse_roi_losses_jsonl(text: &str) -> Result<Vec<RoiLossBreakdown>> {
    let out: Vec<RoiLossBreakdown> = parse_jsonl("roi losses", text)?;
    for b in &out {
        for roi in &b.rois {
            roi.validate()
                .map_err(|e| Error::Validation(format!("image {:?}: {e}", b.image_id)))?;
        }
    }
    Ok(out)
}

/// Number of labeled images for the named dataset presets.
pub mod presets {
    pub const VOC2007_K: usize = 2000;
    pub const VOC2012_K: usize = 4000;
    pub const COCO_K: usize = 30000;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roi(fg: bool, parts: [f64; 4]) -> RoiLoss {
        RoiLoss {
            is_foreground: fg,
            rpn_cls: parts[0],
            rpn_reg: parts[1],
            roi_cls: parts[2],
            roi_reg: parts[3],
        }
    }

    fn rec(id: &str, loss: f64) -> SplitLossRecord {
        SplitLossRecord {
            image_id: id.into(),
            loss,
            n_pos: 1,
        }
    }

    #[test]
    fn mean_over_foreground() {
        let b = RoiLossBreakdown {
            image_id: "a".into(),
            rois: vec![
                roi(true, [0.1, 0.1, 0.1, 0.1]),
                roi(false, [9.0, 9.0, 9.0, 9.0]),
                roi(true, [0.2, 0.2, 0.2, 0.2]),
            ],
        };
        let r = split_loss_image(&b).unwrap();
        assert!((r.loss - 0.6).abs() < 1e-15);
        assert_eq!(r.n_pos, 2);
    }

    #[test]
    fn single_roi_sum() {
        let b = RoiLossBreakdown {
            image_id: "a".into(),
            rois: vec![roi(true, [0.1, 0.2, 0.3, 0.4])],
        };
        assert!((split_loss_image(&b).unwrap().loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn no_foreground_is_infinite() {
        let b = RoiLossBreakdown {
            image_id: "a".into(),
            rois: vec![roi(false, [1.0, 1.0, 1.0, 1.0])],
        };
        let r = split_loss_image(&b).unwrap();
        assert!(r.loss.is_infinite() && r.n_pos == 0);
    }

    #[test]
    fn negative_component_rejected() {
        let b = RoiLossBreakdown {
            image_id: "a".into(),
            rois: vec![roi(false, [1.0, -1.0, 1.0, 1.0])],
        };
        assert!(split_loss_image(&b).is_err());
    }

    #[test]
    fn partition_examples() {
        let rs = [rec("a", 0.1), rec("b", 0.5), rec("c", 0.3)];
        let (l, u) = partition_dataset(&rs, 2).unwrap();
        assert_eq!(l, vec!["a", "c"]);
        assert_eq!(u, vec!["b"]);
        let (l, u) = partition_dataset(&rs, 0).unwrap();
        assert!(l.is_empty() && u.len() == 3);
        let (l, u) = partition_dataset(&rs, 3).unwrap();
        assert!(u.is_empty() && l.len() == 3);
        assert!(partition_dataset(&rs, 4).is_err());
    }

    #[test]
    fn ties_by_id_and_infinite_last() {
        let rs = [rec("z", 0.2), rec("y", f64::INFINITY), rec("b", 0.2), rec("x", 0.9)];
        let (l, u) = partition_dataset(&rs, 3).unwrap();
        assert_eq!(l, vec!["b", "z", "x"]);
        assert_eq!(u, vec!["y"]);
    }

    #[test]
    fn infinite_loss_serializes_as_null() {
        let r = SplitLossRecord {
            image_id: "a".into(),
            loss: f64::INFINITY,
            n_pos: 0,
        };
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"loss\":null"));
        let back: SplitLossRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn parses_roi_lines() {
        let text = r#"{"image_id": "a", "rois": [{"is_foreground": true, "rpn_cls": 0.1, "rpn_reg": 0, "roi_cls": 0.2, "roi_reg": 0}]}
{"image_id": "b", "rois": []}
"#;
        let bs = parse_roi_losses_jsonl(text).unwrap();
        assert_eq!(bs.len(), 2);
        assert!(parse_roi_losses_jsonl(r#"{"image_id": "a"}"#).is_err());
        let neg = r#"{"image_id": "a", "rois": [{"is_foreground": true, "rpn_cls": -0.1, "rpn_reg": 0, "roi_cls": 0.2, "roi_reg": 0}]}"#;
        assert!(matches!(parse_roi_losses_jsonl(neg), Err(Error::Validation(_))));
    }
}
