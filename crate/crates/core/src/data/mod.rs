//! Dataset model and the JSON formats exchanged between pipeline stages.
//!
//! On disk boxes use absolute `[x, y, w, h]`; in memory they are
//! [`BBox`] corner form. Three documents are supported:
//!
//! * the manifest, a single JSON object describing categories and images;
//! * detections JSON-lines, one `{"image_id", "detections"}` record per image;
//! * RoI score JSON-lines, one `{"image_id", "scores"}` record per image
//!   holding a `C x n` matrix aligned with the manifest's proposals.

mod synthetic;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BBox, ScoredBox};
use crate::jsonfmt;
use crate::milhead::ScoreMatrix;

pub use synthetic::{generate_synthetic_dataset, SyntheticDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub active_labels: BTreeSet<usize>,
    pub proposals: Option<Vec<BBox>>,
    pub pseudo_gt: Option<Vec<ScoredBox>>,
    pub split: Option<SplitTag>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, width: f64, height: f64) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            width,
            height,
            active_labels: BTreeSet::new(),
            proposals: None,
            pseudo_gt: None,
            split: None,
        }
    }

    pub fn proposals(&self) -> &[BBox] {
        self.proposals.as_deref().unwrap_or(&[])
    }

    pub fn pseudo_gt(&self) -> &[ScoredBox] {
        self.pseudo_gt.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub categories: Vec<String>,
    pub images: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.image_id == image_id)
    }

    pub fn index_by_id(&self) -> HashMap<&str, usize> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.image_id.as_str(), i))
            .collect()
    }

    /// Ids of images tagged `tag`, in manifest order.
    pub fn ids_with_split(&self, tag: SplitTag) -> Vec<&str> {
        self.images
            .iter()
            .filter(|im| im.split == Some(tag))
            .map(|im| im.image_id.as_str())
            .collect()
    }

    pub fn is_partitioned(&self) -> bool {
        self.images.iter().all(|im| im.split.is_some())
    }

    /// Checks every invariant and clamps boxes into image bounds.
    pub fn validate(mut self) -> Result<Self> {
        let mut names = HashSet::new();
        for name in &self.categories {
            if !names.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate category name {name:?}")));
            }
        }
        let n_classes = self.categories.len();
        let mut ids = HashSet::new();
        for im in &mut self.images {
            if !ids.insert(im.image_id.clone()) {
                return Err(Error::Validation(format!("duplicate image_id {:?}", im.image_id)));
            }
            if !(im.width.is_finite() && im.width > 0.0 && im.height.is_finite() && im.height > 0.0) {
                return Err(Error::Validation(format!(
                    "image {:?} has non-positive size {}x{}",
                    im.image_id, im.width, im.height
                )));
            }
            if let Some(&bad) = im.active_labels.iter().find(|&&c| c >= n_classes) {
                return Err(Error::Validation(format!(
                    "image {:?} has label {bad} outside {n_classes} categories",
                    im.image_id
                )));
            }
            if let Some(props) = im.proposals.as_mut() {
                for b in props.iter_mut() {
                    b.validate()?;
                    *b = b.clamp_to(im.width, im.height);
                }
            }
            if let Some(gt) = im.pseudo_gt.as_mut() {
                for d in gt.iter_mut() {
                    validate_detection(d, n_classes)?;
                    d.bbox = d.bbox.clamp_to(im.width, im.height);
                }
            }
        }
        Ok(self)
    }
}

pub(crate) fn validate_detection(d: &ScoredBox, n_classes: usize) -> Result<()> {
    d.bbox.validate()?;
    if !d.score.is_finite() {
        return Err(Error::Validation(format!("score {} is not finite", d.score)));
    }
    if d.class_id >= n_classes {
        return Err(Error::Validation(format!(
            "class_id {} outside {n_classes} categories",
            d.class_id
        )));
    }
    Ok(())
}

/// Proposals of one image together with their per-class RoI scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBoxSet {
    pub image_id: String,
    pub proposals: Vec<BBox>,
    /// `C x n`, row `c` holds every proposal's score for class `c`.
    pub scores: ScoreMatrix,
}

/// Detections of one image, as exchanged by the detections JSON-lines format.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub image_id: String,
    pub detections: Vec<ScoredBox>,
}

// ---------------------------------------------------------------------------
// wire types

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestWire {
    categories: Vec<String>,
    images: Vec<ImageWire>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageWire {
    image_id: String,
    width: f64,
    height: f64,
    active_labels: Vec<usize>,
    #[serde(default)]
    proposals: Option<Vec<[f64; 4]>>,
    #[serde(default)]
    pseudo_gt: Option<Vec<DetectionWire>>,
    #[serde(default)]
    split: Option<SplitTag>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct DetectionWire {
    bbox: [f64; 4],
    class_id: usize,
    score: f64,
}

impl DetectionWire {
    fn from_scored(d: &ScoredBox) -> Self {
        DetectionWire {
            bbox: d.bbox.to_xywh(),
            class_id: d.class_id,
            score: d.score,
        }
    }

    fn into_scored(self) -> Result<ScoredBox> {
        let [x, y, w, h] = self.bbox;
        Ok(ScoredBox::new(BBox::from_xywh(x, y, w, h)?, self.score, self.class_id))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionsLineWire {
    image_id: String,
    detections: Vec<DetectionWire>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoresLineWire {
    image_id: String,
    scores: Vec<Vec<f64>>,
}

fn xywh(b: [f64; 4]) -> Result<BBox> {
    BBox::from_xywh(b[0], b[1], b[2], b[3])
}

impl ManifestWire {
    fn from_manifest(m: &DatasetManifest) -> Self {
        ManifestWire {
            categories: m.categories.clone(),
            images: m
                .images
                .iter()
                .map(|im| ImageWire {
                    image_id: im.image_id.clone(),
                    width: im.width,
                    height: im.height,
                    active_labels: im.active_labels.iter().copied().collect(),
                    proposals: im.proposals.as_ref().map(|p| p.iter().map(BBox::to_xywh).collect()),
                    pseudo_gt: im
                        .pseudo_gt
                        .as_ref()
                        .map(|g| g.iter().map(DetectionWire::from_scored).collect()),
                    split: im.split,
                })
                .collect(),
        }
    }

    fn into_manifest(self) -> Result<DatasetManifest> {
        let mut images = Vec::with_capacity(self.images.len());
        for im in self.images {
            let proposals = match im.proposals {
                Some(p) => Some(p.into_iter().map(xywh).collect::<Result<Vec<_>>>()?),
                None => None,
            };
            let pseudo_gt = match im.pseudo_gt {
                Some(g) => Some(
                    g.into_iter()
                        .map(DetectionWire::into_scored)
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            images.push(ImageRecord {
                image_id: im.image_id,
                width: im.width,
                height: im.height,
                active_labels: im.active_labels.into_iter().collect(),
                proposals,
                pseudo_gt,
                split: im.split,
            });
        }
        Ok(DatasetManifest {
            categories: self.categories,
            images,
        })
    }
}

// ---------------------------------------------------------------------------
// manifest

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let wire: ManifestWire = serde_json::from_str(text).map_err(|e| Error::from_json("manifest", e))?;
    wire.into_manifest()?.validate()
}

pub fn manifest_to_bytes(m: &DatasetManifest) -> Result<Vec<u8>> {
    jsonfmt::to_pretty_bytes(&ManifestWire::from_manifest(m))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Writes sorted keys, `%.17g` floats and a trailing newline.
pub fn save_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest_to_bytes(m)?).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// JSON-lines

fn jsonl_records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub(crate) fn parse_jsonl<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> Result<Vec<T>> {
    jsonl_records(text)
        .map(|(line_no, line)| {
            serde_json::from_str(line).map_err(|e| Error::from_json(&format!("{what} line {line_no}"), e))
        })
        .collect()
}

fn check_unique(ids: impl Iterator<Item = impl AsRef<str>>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        let id = id.as_ref().to_owned();
        if !seen.insert(id.clone()) {
            return Err(Error::Validation(format!("duplicate image_id {id:?}")));
        }
    }
    Ok(())
}

pub fn parse_detections_jsonl(text: &str) -> Result<Vec<ImageDetections>> {
    let lines: Vec<DetectionsLineWire> = parse_jsonl("detections", text)?;
    let mut out = Vec::with_capacity(lines.len());
    for l in lines {
        let detections = l
            .detections
            .into_iter()
            .map(DetectionWire::into_scored)
            .collect::<Result<Vec<_>>>()?;
        for d in &detections {
            if !d.score.is_finite() {
                return Err(Error::Validation(format!("score {} is not finite", d.score)));
            }
        }
        out.push(ImageDetections {
            image_id: l.image_id,
            detections,
        });
    }
    check_unique(out.iter().map(|d| d.image_id.as_str()))?;
    Ok(out)
}

pub fn detections_to_jsonl(dets: &[ImageDetections]) -> Result<String> {
    let wire: Vec<DetectionsLineWire> = dets
        .iter()
        .map(|d| DetectionsLineWire {
            image_id: d.image_id.clone(),
            detections: d.detections.iter().map(DetectionWire::from_scored).collect(),
        })
        .collect();
    jsonfmt::to_jsonl(&wire)
}

/// One RoI score record before it is joined with the manifest's proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub image_id: String,
    pub scores: ScoreMatrix,
}

pub fn parse_scores_jsonl(text: &str) -> Result<Vec<ScoreRecord>> {
    let lines: Vec<ScoresLineWire> = parse_jsonl("scores", text)?;
    let mut out = Vec::with_capacity(lines.len());
    for l in lines {
        let rows = l.scores.len();
        let cols = l.scores.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || l.scores.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation(format!(
                "scores for {:?} must be a non-empty rectangular matrix",
                l.image_id
            )));
        }
        let flat: Vec<f64> = l.scores.into_iter().flatten().collect();
        let arr = Array2::from_shape_vec((rows, cols), flat).expect("rectangular");
        out.push(ScoreRecord {
            image_id: l.image_id,
            scores: ScoreMatrix::new(arr)?,
        });
    }
    check_unique(out.iter().map(|r| r.image_id.as_str()))?;
    Ok(out)
}

pub fn scores_to_jsonl(sets: &[ScoredBoxSet]) -> Result<String> {
    let wire: Vec<ScoresLineWire> = sets
        .iter()
        .map(|s| ScoresLineWire {
            image_id: s.image_id.clone(),
            scores: s.scores.view().rows().into_iter().map(|r| r.to_vec()).collect(),
        })
        .collect();
    jsonfmt::to_jsonl(&wire)
}

/// Joins score records with the manifest's proposals, in manifest order.
/// Images without a score record are skipped.
pub fn attach_scores(m: &DatasetManifest, records: Vec<ScoreRecord>) -> Result<Vec<ScoredBoxSet>> {
    let index = m.index_by_id();
    let mut by_image: Vec<Option<ScoreMatrix>> = vec![None; m.images.len()];
    for r in records {
        let &i = index
            .get(r.image_id.as_str())
            .ok_or_else(|| Error::Validation(format!("scores reference unknown image {:?}", r.image_id)))?;
        by_image[i] = Some(r.scores);
    }
    let mut out = Vec::new();
    for (im, scores) in m.images.iter().zip(by_image) {
        let Some(scores) = scores else { continue };
        let proposals = im
            .proposals
            .clone()
            .ok_or_else(|| Error::Validation(format!("image {:?} has scores but no proposals", im.image_id)))?;
        if scores.n_classes() != m.n_classes() || scores.n_proposals() != proposals.len() {
            return Err(Error::Shape(format!(
                "image {:?}: scores are {}x{}, expected {}x{}",
                im.image_id,
                scores.n_classes(),
                scores.n_proposals(),
                m.n_classes(),
                proposals.len()
            )));
        }
        out.push(ScoredBoxSet {
            image_id: im.image_id.clone(),
            proposals,
            scores,
        });
    }
    Ok(out)
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: impl AsRef<Path>, text: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "categories": ["dog"],
        "images": [{"image_id": "a", "width": 10, "height": 10, "active_labels": [0]}]
    }"#;

    #[test]
    fn loads_minimal_manifest() {
        let m = parse_manifest(MINIMAL).unwrap();
        assert_eq!(m.images.len(), 1);
        assert_eq!(m.images[0].active_labels, BTreeSet::from([0]));
        assert_eq!(m.images[0].proposals, None);
    }

    #[test]
    fn duplicate_image_id_is_validation_error() {
        let text = r#"{"categories": ["dog"], "images": [
            {"image_id": "a", "width": 10, "height": 10, "active_labels": [0]},
            {"image_id": "a", "width": 10, "height": 10, "active_labels": [0]}]}"#;
        assert!(matches!(parse_manifest(text), Err(Error::Validation(_))));
    }

    #[test]
    fn error_kinds() {
        assert!(matches!(parse_manifest("{"), Err(Error::Parse(_))));
        assert!(matches!(parse_manifest(r#"{"categories": []}"#), Err(Error::Schema(_))));
        let bad_label = r#"{"categories": ["dog"], "images": [
            {"image_id": "a", "width": 10, "height": 10, "active_labels": [3]}]}"#;
        assert!(matches!(parse_manifest(bad_label), Err(Error::Validation(_))));
        let neg = r#"{"categories": ["dog"], "images": [
            {"image_id": "a", "width": 10, "height": 10, "active_labels": [0],
             "proposals": [[0, 0, -1, 2]]}]}"#;
        assert!(matches!(parse_manifest(neg), Err(Error::Validation(_))));
    }

    #[test]
    fn boxes_are_clamped() {
        let text = r#"{"categories": ["dog"], "images": [
            {"image_id": "a", "width": 10, "height": 10, "active_labels": [0],
             "proposals": [[-2, 5, 20, 20]],
             "pseudo_gt": [{"bbox": [8, 8, 4, 4], "class_id": 0, "score": 0.5}]}]}"#;
        let m = parse_manifest(text).unwrap();
        let im = &m.images[0];
        assert_eq!(im.proposals()[0], BBox::new(0.0, 5.0, 10.0, 10.0).unwrap());
        assert_eq!(im.pseudo_gt()[0].bbox, BBox::new(8.0, 8.0, 10.0, 10.0).unwrap());
    }

    #[test]
    fn save_empty_and_unwritable() {
        let m = DatasetManifest {
            categories: vec!["a".into()],
            images: vec![],
        };
        let bytes = manifest_to_bytes(&m).unwrap();
        assert!(bytes.ends_with(b"\n"));
        let back = parse_manifest(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);

        let dir = tempfile::tempdir().unwrap();
        let err = save_manifest(&m, dir.path().join("missing").join("m.json")).unwrap_err();
        assert!(err.is_io());
    }

    #[test]
    fn detections_round_trip_and_duplicates() {
        let d = vec![ImageDetections {
            image_id: "x".into(),
            detections: vec![ScoredBox::new(BBox::new(1.0, 2.0, 4.0, 8.0).unwrap(), 0.25, 3)],
        }];
        let text = detections_to_jsonl(&d).unwrap();
        assert_eq!(
            text,
            "{\"detections\":[{\"bbox\":[1,2,3,6],\"class_id\":3,\"score\":0.25}],\"image_id\":\"x\"}\n"
        );
        assert_eq!(parse_detections_jsonl(&text).unwrap(), d);
        let twice = format!("{text}{text}");
        assert!(matches!(parse_detections_jsonl(&twice), Err(Error::Validation(_))));
    }

    #[test]
    fn scores_must_be_rectangular() {
        let ragged = r#"{"image_id": "a", "scores": [[0.1, 0.2], [0.3]]}"#;
        assert!(parse_scores_jsonl(ragged).is_err());
        let out_of_range = r#"{"image_id": "a", "scores": [[1.5]]}"#;
        assert!(parse_scores_jsonl(out_of_range).is_err());
    }

    #[test]
    fn attach_checks_shape() {
        let text = r#"{"categories": ["dog", "cat"], "images": [
            {"image_id": "a", "width": 10, "height": 10, "active_labels": [0],
             "proposals": [[0, 0, 5, 5], [1, 1, 5, 5]]}]}"#;
        let m = parse_manifest(text).unwrap();
        let ok = parse_scores_jsonl(r#"{"image_id": "a", "scores": [[0.1, 0.2], [0.3, 0.4]]}"#).unwrap();
        let sets = attach_scores(&m, ok).unwrap();
        assert_eq!(sets[0].scores.n_proposals(), 2);
        let bad = parse_scores_jsonl(r#"{"image_id": "a", "scores": [[0.1], [0.3]]}"#).unwrap();
        assert!(matches!(attach_scores(&m, bad), Err(Error::Shape(_))));
        let unknown = parse_scores_jsonl(r#"{"image_id": "zz", "scores": [[0.1], [0.3]]}"#).unwrap();
        assert!(attach_scores(&m, unknown).is_err());
    }
}
