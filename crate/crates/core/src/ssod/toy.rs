//! A linear detector over fixed per-proposal features.
//!
//! Features of a proposal are its normalized center, log size, log aspect
//! (with squares of the size and aspect terms) followed by the stage-one RoI
//! scores of every class, all standardized with statistics of the images the
//! detector was built from. A softmax over `C + 1` outputs (last =
//! background) scores each proposal, and a class-specific linear regressor
//! predicts box offsets. Parameters are laid out as the `(C + 1) x F`
//! classification block followed by the `4C x F` regression block.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::{Array1, Array2, Axis};

use super::{DetectorAdapter, LossAndGrad};
use crate::data::{DatasetManifest, ImageRecord, ScoredBoxSet};
use crate::error::{Error, Result};
use crate::geom::{nms_indices, BBox, ScoredBox};
use crate::milhead::{
    decode_offsets, oicr_loss, oicr_pseudo_labels, regression_loss, smooth_l1, smooth_l1_grad, softmax,
    RefinementTarget, DEFAULT_IOU_ASSIGN, PROB_EPS,
};
use crate::split::{RoiLoss, RoiLossBreakdown};

const GEOMETRY_FEATURES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySettings {
    /// Per-class NMS applied to predictions.
    pub nms_threshold: f64,
    /// Predictions below this score are dropped.
    pub score_floor: f64,
    pub max_detections: usize,
    /// IoU for a proposal to count as foreground of a target box.
    pub iou_foreground: f64,
    pub lambda_reg: f64,
}

impl Default for ToySettings {
    fn default() -> Self {
        ToySettings {
            nms_threshold: 0.5,
            score_floor: 0.01,
            max_detections: 100,
            iou_foreground: DEFAULT_IOU_ASSIGN,
            lambda_reg: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct ImageFeatures {
    proposals: Vec<BBox>,
    /// `N x F`, standardized, first column constant 1.
    rows: Array2<f64>,
}

#[derive(Debug, Clone)]
struct Scaler {
    mean: Array1<f64>,
    std: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyDetector {
    n_classes: usize,
    n_features: usize,
    params: Vec<f64>,
    scaler: Scaler,
    images: HashMap<String, ImageFeatures>,
    pub settings: ToySettings,
}

/// `a * b^T` for row-major `a` (`m x k`) and `b` (`n x k`), summed left to
/// right so results do not depend on the BLAS kernel picked for the host.
fn matmul_nt(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (a, b) = (a.as_standard_layout(), b.as_standard_layout());
    let k = a.ncols();
    assert_eq!(k, b.ncols(), "inner dimensions differ");
    let (sa, sb) = (
        a.as_slice().expect("standard layout"),
        b.as_slice().expect("standard layout"),
    );
    let mut out = Vec::with_capacity(a.nrows() * b.nrows());
    for ra in sa.chunks_exact(k.max(1)).take(a.nrows()) {
        for rb in sb.chunks_exact(k.max(1)).take(b.nrows()) {
            out.push(ra.iter().zip(rb).fold(0.0, |acc, (x, y)| acc + x * y));
        }
    }
    Array2::from_shape_vec((a.nrows(), b.nrows()), out).expect("product shape")
}

fn raw_features(im: &ImageRecord, set: &ScoredBoxSet) -> Array2<f64> {
    let c = set.scores.n_classes();
    let n = set.proposals.len();
    let mut rows = Array2::zeros((n, GEOMETRY_FEATURES + c));
    for (r, p) in set.proposals.iter().enumerate() {
        let (cx, cy) = p.center();
        let lw = (p.width().max(1e-3) / im.width).ln();
        let lh = (p.height().max(1e-3) / im.height).ln();
        let la = (p.width().max(1e-3) / p.height().max(1e-3)).ln();
        let geo = [
            cx / im.width - 0.5,
            cy / im.height - 0.5,
            lw,
            lh,
            la,
            lw * lw,
            lh * lh,
            la * la,
        ];
        for (j, v) in geo.into_iter().enumerate() {
            rows[[r, j]] = v;
        }
        for k in 0..c {
            rows[[r, GEOMETRY_FEATURES + k]] = set.scores.get(k, r);
        }
    }
    rows
}

impl ToyDetector {
    /// Builds a zero-initialized detector whose feature standardization is
    /// fitted on `sets`. Every set must name an image of `manifest`.
    pub fn new(manifest: &DatasetManifest, sets: &[ScoredBoxSet]) -> Result<Self> {
        let n_classes = manifest.n_classes();
        if sets.is_empty() {
            return Err(Error::InvalidArgument("toy detector needs at least one image".into()));
        }
        let raw = collect_raw(manifest, sets)?;
        let width = GEOMETRY_FEATURES + n_classes;
        let all: Vec<f64> = raw.iter().flat_map(|(_, _, r)| r.iter().copied()).collect();
        let all = Array2::from_shape_vec((all.len() / width, width), all).expect("stacked rows");
        let mean = all.mean_axis(Axis(0)).expect("non-empty");
        let std = all.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-9 { s } else { 1.0 });
        let n_features = width + 1;
        let mut det = ToyDetector {
            n_classes,
            n_features,
            params: vec![0.0; (n_classes + 1) * n_features + 4 * n_classes * n_features],
            scaler: Scaler { mean, std },
            images: HashMap::new(),
            settings: ToySettings::default(),
        };
        det.insert(raw);
        Ok(det)
    }

    /// Adds more images (for example a held-out split) using the existing
    /// standardization.
    pub fn register(&mut self, manifest: &DatasetManifest, sets: &[ScoredBoxSet]) -> Result<()> {
        if manifest.n_classes() != self.n_classes {
            return Err(Error::Shape(format!(
                "detector has {} classes, manifest {}",
                self.n_classes,
                manifest.n_classes()
            )));
        }
        let raw = collect_raw(manifest, sets)?;
        self.insert(raw);
        Ok(())
    }

    fn insert(&mut self, raw: Vec<(String, Vec<BBox>, Array2<f64>)>) {
        for (id, proposals, r) in raw {
            let n = r.nrows();
            let mut rows = Array2::ones((n, self.n_features));
            let scaled = (&r - &self.scaler.mean) / &self.scaler.std;
            rows.slice_mut(ndarray::s![.., 1..]).assign(&scaled);
            self.images.insert(id, ImageFeatures { proposals, rows });
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_parameters(&self) -> usize {
        self.params.len()
    }

    pub fn classification_block(&self) -> Range<usize> {
        0..(self.n_classes + 1) * self.n_features
    }

    pub fn regression_block(&self) -> Range<usize> {
        self.classification_block().end..self.params.len()
    }

    fn cls_weights(&self) -> Array2<f64> {
        let r = self.classification_block();
        Array2::from_shape_vec((self.n_classes + 1, self.n_features), self.params[r].to_vec()).expect("block shape")
    }

    fn reg_weights(&self) -> Array2<f64> {
        let r = self.regression_block();
        Array2::from_shape_vec((4 * self.n_classes, self.n_features), self.params[r].to_vec()).expect("block shape")
    }

    fn features(&self, image: &ImageRecord) -> Result<&ImageFeatures> {
        self.images
            .get(&image.image_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no features registered for {:?}", image.image_id)))
    }

    /// `(C + 1) x N` class probabilities.
    fn probabilities(&self, f: &ImageFeatures) -> Array2<f64> {
        let logits = matmul_nt(&self.cls_weights(), &f.rows);
        softmax(logits.view(), Axis(0))
    }

    /// `N x 4C` offsets.
    fn offsets(&self, f: &ImageFeatures) -> Array2<f64> {
        matmul_nt(&f.rows, &self.reg_weights())
    }

    fn targets(&self, image: &ImageRecord, f: &ImageFeatures) -> Result<RefinementTarget> {
        let mut t = oicr_pseudo_labels(
            image.pseudo_gt(),
            &f.proposals,
            self.n_classes,
            self.settings.iou_foreground,
        )?;
        // annotations, pseudo or not, are trusted fully here
        t.weights.iter_mut().for_each(|w| *w = 1.0);
        Ok(t)
    }

    fn image_loss(&self, image: &ImageRecord, with_regression: bool, grad: &mut [f64]) -> Result<f64> {
        let f = self.features(image)?;
        let n = f.proposals.len();
        let target = self.targets(image, f)?;
        let probs = self.probabilities(f);
        let mut loss = oicr_loss(probs.view(), &target)?;

        // d/dlogits of the weighted mean cross-entropy
        let mut dlogits = &probs - &target.labels;
        for (mut col, w) in dlogits.columns_mut().into_iter().zip(&target.weights) {
            col.mapv_inplace(|v| v * w / n as f64);
        }
        let dcls = matmul_nt(&dlogits, &f.rows.t().to_owned());
        let cls_range = self.classification_block();
        for (g, d) in grad[cls_range].iter_mut().zip(dcls.iter()) {
            *g += d;
        }

        if with_regression && !target.regression_targets.is_empty() {
            let offsets = self.offsets(f);
            let classes = target.assigned_classes();
            let mut pred = Vec::with_capacity(target.regression_targets.len());
            let mut goal = Vec::with_capacity(target.regression_targets.len());
            for &(r, t) in &target.regression_targets {
                let k = classes[r];
                pred.push([0, 1, 2, 3].map(|j| offsets[[r, 4 * k + j]]));
                goal.push(t);
            }
            loss += regression_loss(&pred, &goal, self.settings.lambda_reg)?;

            let n_pos = pred.len() as f64;
            let reg_start = self.regression_block().start;
            for ((&(r, _), p), g) in target.regression_targets.iter().zip(&pred).zip(&goal) {
                let k = classes[r];
                for j in 0..4 {
                    let d = self.settings.lambda_reg * smooth_l1_grad(p[j] - g[j]) / n_pos;
                    let row = reg_start + (4 * k + j) * self.n_features;
                    for (gw, x) in grad[row..row + self.n_features].iter_mut().zip(f.rows.row(r)) {
                        *gw += d * x;
                    }
                }
            }
        }
        Ok(loss)
    }

    fn batch_loss(&self, batch: &[ImageRecord], with_regression: bool) -> Result<LossAndGrad> {
        let mut grad = vec![0.0; self.params.len()];
        if batch.is_empty() {
            return Ok(LossAndGrad { value: 0.0, grad });
        }
        let mut value = 0.0;
        for im in batch {
            value += self.image_loss(im, with_regression, &mut grad)?;
        }
        let k = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= k);
        Ok(LossAndGrad { value: value / k, grad })
    }

    /// Per-RoI loss terms against `image.pseudo_gt`, for the clean/noisy
    /// split. The toy model has no proposal stage, so `rpn_cls` is the
    /// binary objectness loss of the background output and `rpn_reg` is 0.
    pub fn roi_losses(&self, image: &ImageRecord) -> Result<RoiLossBreakdown> {
        let f = self.features(image)?;
        let target = self.targets(image, f)?;
        let probs = self.probabilities(f);
        let offsets = self.offsets(f);
        let classes = target.assigned_classes();
        let reg: HashMap<usize, [f64; 4]> = target.regression_targets.iter().copied().collect();
        let bg = self.n_classes;
        let rois = classes
            .iter()
            .enumerate()
            .map(|(r, &k)| {
                let p_bg = probs[[bg, r]];
                let is_foreground = k != bg;
                let rpn_cls = if is_foreground {
                    -(1.0 - p_bg).max(PROB_EPS).ln()
                } else {
                    -p_bg.max(PROB_EPS).ln()
                };
                let roi_cls = -probs[[k, r]].max(PROB_EPS).ln();
                let roi_reg = match reg.get(&r) {
                    Some(t) => (0..4).map(|j| smooth_l1(offsets[[r, 4 * k + j]] - t[j])).sum(),
                    None => 0.0,
                };
                RoiLoss {
                    is_foreground,
                    rpn_cls,
                    rpn_reg: 0.0,
                    roi_cls,
                    roi_reg,
                }
            })
            .collect();
        Ok(RoiLossBreakdown {
            image_id: image.image_id.clone(),
            rois,
        })
    }
}

/// Image id, proposals and stage-one scores.
type RawImage = (String, Vec<BBox>, Array2<f64>);

fn collect_raw(manifest: &DatasetManifest, sets: &[ScoredBoxSet]) -> Result<Vec<RawImage>> {
    let index = manifest.index_by_id();
    sets.iter()
        .map(|s| {
            let &i = index
                .get(s.image_id.as_str())
                .ok_or_else(|| Error::Validation(format!("scores for unknown image {:?}", s.image_id)))?;
            if s.scores.n_classes() != manifest.n_classes() {
                return Err(Error::Shape(format!(
                    "image {:?} has {} score rows for {} classes",
                    s.image_id,
                    s.scores.n_classes(),
                    manifest.n_classes()
                )));
            }
            Ok((
                s.image_id.clone(),
                s.proposals.clone(),
                raw_features(&manifest.images[i], s),
            ))
        })
        .collect()
}

impl DetectorAdapter for ToyDetector {
    fn parameters(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn predict(&self, image: &ImageRecord) -> Result<Vec<ScoredBox>> {
        let f = self.features(image)?;
        let probs = self.probabilities(f);
        let offsets = self.offsets(f);
        let mut out = Vec::new();
        for c in 0..self.n_classes {
            let mut boxes = Vec::new();
            let mut scores = Vec::new();
            for (r, p) in f.proposals.iter().enumerate() {
                let s = probs[[c, r]];
                if s < self.settings.score_floor {
                    continue;
                }
                let o = [0, 1, 2, 3].map(|j| offsets[[r, 4 * c + j]]);
                let b = decode_offsets(p, &o).clamp_to(image.width, image.height);
                if b.validate().is_ok() {
                    boxes.push(b);
                    scores.push(s);
                }
            }
            for k in nms_indices(&boxes, &scores, self.settings.nms_threshold) {
                out.push(ScoredBox::new(boxes[k], scores[k], c));
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
        out.truncate(self.settings.max_detections);
        Ok(out)
    }

    fn supervised_loss(&self, batch: &[ImageRecord]) -> Result<LossAndGrad> {
        self.batch_loss(batch, true)
    }

    fn unsupervised_cls_loss(&self, batch: &[ImageRecord]) -> Result<LossAndGrad> {
        self.batch_loss(batch, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;

    fn fixture() -> (DatasetManifest, ToyDetector) {
        let d = generate_synthetic_dataset(2, 6, 3, 0.3).unwrap();
        let mut m = d.ground_truth_manifest();
        for im in &mut m.images {
            // pretend the true boxes are pseudo annotations
            im.pseudo_gt.as_mut().unwrap().iter_mut().for_each(|b| b.score = 0.9);
        }
        let det = ToyDetector::new(&m, &d.scores).unwrap();
        (m, det)
    }

    fn perturbed(det: &ToyDetector, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..det.n_parameters()).map(|_| rng.random_range(-0.3..0.3)).collect()
    }

    fn finite_difference_check(supervised: bool) {
        let (m, mut det) = fixture();
        let params = perturbed(&det, 9);
        det.set_parameters(&params).unwrap();
        let batch = &m.images[..3];
        let eval = |d: &ToyDetector| {
            if supervised {
                d.supervised_loss(batch).unwrap()
            } else {
                d.unsupervised_cls_loss(batch).unwrap()
            }
        };
        let analytic = eval(&det).grad;
        let h = 1e-6;
        let mut probe = det.clone();
        for i in (0..params.len()).step_by(7) {
            let mut p = params.clone();
            p[i] += h;
            probe.set_parameters(&p).unwrap();
            let up = eval(&probe).value;
            p[i] -= 2.0 * h;
            probe.set_parameters(&p).unwrap();
            let down = eval(&probe).value;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic[i] - numeric).abs() / denom < 1e-4,
                "param {i}: analytic {} numeric {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        finite_difference_check(true);
    }

    #[test]
    fn unsupervised_gradient_matches_finite_differences() {
        finite_difference_check(false);
    }

    #[test]
    fn unsupervised_gradient_skips_regression_block() {
        let (m, mut det) = fixture();
        det.set_parameters(&perturbed(&det, 1)).unwrap();
        let g = det.unsupervised_cls_loss(&m.images).unwrap().grad;
        assert!(g[det.regression_block()].iter().all(|&v| v == 0.0));
        let g = det.supervised_loss(&m.images).unwrap().grad;
        assert!(g[det.regression_block()].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn untrained_detector_is_uniform() {
        let (m, det) = fixture();
        let preds = det.predict(&m.images[0]).unwrap();
        let uniform = 1.0 / (det.n_classes() + 1) as f64;
        assert!(preds.iter().all(|p| (p.score - uniform).abs() < 1e-12));
    }

    #[test]
    fn roi_losses_are_valid_breakdowns() {
        let (m, det) = fixture();
        let b = det.roi_losses(&m.images[0]).unwrap();
        assert!(b.rois.iter().any(|r| r.is_foreground));
        let rec = crate::split::split_loss_image(&b).unwrap();
        assert!(rec.loss.is_finite() && rec.loss > 0.0);
    }

    #[test]
    fn unknown_image_and_bad_parameters() {
        let (_, mut det) = fixture();
        assert!(det.predict(&ImageRecord::new("nope", 10.0, 10.0)).is_err());
        assert!(det.set_parameters(&[0.0]).is_err());
    }
}
