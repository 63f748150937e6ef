//! Numeric kernels of a WSDDN + OICR detection head.
//!
//! Matrices are `classes x proposals`. The two-stream WSDDN score is
//! `softmax_over_classes(xc) ⊙ softmax_over_proposals(xd)`; summing a class
//! row gives the image-level score that the MIL loss compares against the
//! image labels. Refinement branches see `C + 1` rows, the last one being
//! background.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::geom::{iou, BBox, ScoredBox};

/// Probability clamp used inside every logarithm.
pub const PROB_EPS: f64 = 1e-6;

/// Default IoU for assigning a proposal to a seed box.
pub const DEFAULT_IOU_ASSIGN: f64 = 0.5;

/// Finite `C x N` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix(Array2<f64>);

impl LogitMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (c, n) = values.dim();
        if c == 0 || n == 0 {
            return Err(Error::Shape(format!("logit matrix must be non-empty, got {c}x{n}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("logits must be finite".into()));
        }
        Ok(LogitMatrix(values))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// `C x N` scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix(Array2<f64>);

impl ScoreMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("scores must lie in [0, 1]".into()));
        }
        Ok(ScoreMatrix(values))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn n_classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_proposals(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, class: usize, proposal: usize) -> f64 {
        self.0[[class, proposal]]
    }
}

/// Softmax along `axis`, max-subtracted.
pub fn softmax(x: ArrayView2<'_, f64>, axis: Axis) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut lane in out.lanes_mut(axis) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    out
}

fn same_shape(a: &LogitMatrix, b: &LogitMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "classification logits are {:?}, detection logits are {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn softmax_pair(xc: &LogitMatrix, xd: &LogitMatrix) -> (Array2<f64>, Array2<f64>) {
    // axis 0 runs over classes (one lane per proposal), axis 1 over proposals
    (softmax(xc.view(), Axis(0)), softmax(xd.view(), Axis(1)))
}

pub fn wsddn_scores(xc: &LogitMatrix, xd: &LogitMatrix) -> Result<ScoreMatrix> {
    same_shape(xc, xd)?;
    let (a, b) = softmax_pair(xc, xd);
    let prod = (&a * &b).mapv(|v| v.clamp(0.0, 1.0));
    Ok(ScoreMatrix(prod))
}

/// Image-level class scores, one per row.
pub fn image_scores(xr: &ScoreMatrix) -> Vec<f64> {
    xr.0.sum_axis(Axis(1)).iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross-entropy between image scores and image labels.
pub fn mil_loss(phi: &[f64], labels: &[f64]) -> Result<f64> {
    if phi.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} image scores but {} labels",
            phi.len(),
            labels.len()
        )));
    }
    Ok(phi
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .fold(0.0, |acc, v| acc + v))
}

/// Gradient of `mil_loss(image_scores(wsddn_scores(xc, xd)), y)` with
/// respect to both logit matrices. Where the clamp is active the loss is
/// flat and the gradient is zero.
pub fn mil_loss_grad(xc: &LogitMatrix, xd: &LogitMatrix, labels: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
    same_shape(xc, xd)?;
    let (c, _) = xc.dim();
    if labels.len() != c {
        return Err(Error::Shape(format!("{c} classes but {} labels", labels.len())));
    }
    let (a, b) = softmax_pair(xc, xd);
    let phi = (&a * &b).sum_axis(Axis(1));

    let dphi: Vec<f64> = phi
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                0.0
            } else {
                -y / p + (1.0 - y) / (1.0 - p)
            }
        })
        .collect();

    // dL/dA = dphi_c * B, dL/dB = dphi_c * A
    let mut da = b.clone();
    let mut db = a.clone();
    for (ci, &g) in dphi.iter().enumerate() {
        da.row_mut(ci).mapv_inplace(|v| v * g);
        db.row_mut(ci).mapv_inplace(|v| v * g);
    }

    Ok((softmax_backward(&a, &da, Axis(0)), softmax_backward(&b, &db, Axis(1))))
}

/// Pulls `d_out` back through a softmax taken along `axis`.
fn softmax_backward(s: &Array2<f64>, d_out: &Array2<f64>, axis: Axis) -> Array2<f64> {
    let mut grad = Array2::zeros(s.dim());
    for ((sl, gl), mut out) in s
        .lanes(axis)
        .into_iter()
        .zip(d_out.lanes(axis))
        .zip(grad.lanes_mut(axis))
    {
        let dot: f64 = sl.iter().zip(gl.iter()).map(|(a, b)| a * b).sum();
        Zip::from(&mut out)
            .and(&sl)
            .and(&gl)
            .for_each(|o, &sv, &gv| *o = sv * (gv - dot));
    }
    grad
}

/// Pseudo labels for one refinement branch.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTarget {
    /// `(C + 1) x N` one-hot columns; row `C` is background.
    pub labels: Array2<f64>,
    pub weights: Vec<f64>,
    /// `(proposal index, offsets)` for every foreground proposal.
    pub regression_targets: Vec<(usize, [f64; 4])>,
}

impl RefinementTarget {
    pub fn n_classes(&self) -> usize {
        self.labels.nrows() - 1
    }

    /// Class index per proposal, `n_classes()` meaning background.
    pub fn assigned_classes(&self) -> Vec<usize> {
        self.labels
            .columns()
            .into_iter()
            .map(|col| col.iter().position(|&v| v == 1.0).expect("one-hot column"))
            .collect()
    }
}

/// Offsets `(dx/w, dy/h, ln(w'/w), ln(h'/h))` from `proposal` toward `target`.
pub fn encode_offsets(proposal: &BBox, target: &BBox) -> [f64; 4] {
    let (px, py) = proposal.center();
    let (tx, ty) = target.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    [
        (tx - px) / pw,
        (ty - py) / ph,
        (target.width() / pw).ln(),
        (target.height() / ph).ln(),
    ]
}

/// Inverse of [`encode_offsets`]. Width and height offsets are capped so a
/// wild prediction cannot overflow.
pub fn decode_offsets(proposal: &BBox, offsets: &[f64; 4]) -> BBox {
    const MAX_LOG_SCALE: f64 = 4.0;
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = px + offsets[0] * pw;
    let cy = py + offsets[1] * ph;
    let w = pw * offsets[2].min(MAX_LOG_SCALE).exp();
    let h = ph * offsets[3].min(MAX_LOG_SCALE).exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// Assigns every proposal to its best-overlapping seed box. Proposals whose
/// best IoU is below `iou_assign` become background with weight 1; matched
/// proposals take the seed's class, its score as weight, and offsets
/// toward it. Ties between seeds go to the earlier seed.
pub fn oicr_pseudo_labels(
    seeds: &[ScoredBox],
    proposals: &[BBox],
    n_classes: usize,
    iou_assign: f64,
) -> Result<RefinementTarget> {
    if proposals.is_empty() {
        return Err(Error::InvalidArgument("no proposals to label".into()));
    }
    if !(iou_assign > 0.0 && iou_assign < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "iou_assign must lie in (0, 1), got {iou_assign}"
        )));
    }
    if let Some(s) = seeds.iter().find(|s| s.class_id >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "seed class {} outside {n_classes} classes",
            s.class_id
        )));
    }
    let n = proposals.len();
    let mut labels = Array2::zeros((n_classes + 1, n));
    let mut weights = vec![1.0; n];
    let mut regression_targets = Vec::new();
    for (r, p) in proposals.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, s) in seeds.iter().enumerate() {
            let o = iou(p, &s.bbox);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, o)) if o >= iou_assign => {
                let s = &seeds[j];
                labels[[s.class_id, r]] = 1.0;
                weights[r] = s.score;
                regression_targets.push((r, encode_offsets(p, &s.bbox)));
            }
            _ => labels[[n_classes, r]] = 1.0,
        }
    }
    Ok(RefinementTarget {
        labels,
        weights,
        regression_targets,
    })
}

/// Weighted cross-entropy of one refinement branch, averaged over proposals.
/// `probs` holds post-softmax `(C + 1) x N` probabilities.
pub fn oicr_loss(probs: ArrayView2<'_, f64>, target: &RefinementTarget) -> Result<f64> {
    if probs.dim() != target.labels.dim() || target.weights.len() != probs.ncols() {
        return Err(Error::Shape(format!(
            "probabilities are {:?}, targets are {:?} with {} weights",
            probs.dim(),
            target.labels.dim(),
            target.weights.len()
        )));
    }
    let n = probs.ncols() as f64;
    let mut total = 0.0;
    for (r, w) in target.weights.iter().enumerate() {
        for c in 0..probs.nrows() {
            let y = target.labels[[c, r]];
            if y != 0.0 {
                total -= w * y * probs[[c, r]].clamp(PROB_EPS, 1.0).ln();
            }
        }
    }
    Ok(total / n)
}

/// Smooth-L1 with unit transition point.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Mean over positives of `lambda_reg * Σ smoothL1(t - t̂)`; zero without positives.
pub fn regression_loss(pred: &[[f64; 4]], target: &[[f64; 4]], lambda_reg: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predicted offsets but {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(t, th)| lambda_reg * t.iter().zip(th).map(|(a, b)| smooth_l1(a - b)).sum::<f64>())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Element-wise mean of RoI scores obtained from several input views.
pub fn multi_input_average(views: &[ScoreMatrix]) -> Result<ScoreMatrix> {
    let first = views
        .first()
        .ok_or_else(|| Error::InvalidArgument("no score matrices to average".into()))?;
    let mut sum = first.0.clone();
    for v in &views[1..] {
        if v.0.dim() != first.0.dim() {
            return Err(Error::Shape(format!(
                "score matrices {:?} and {:?} differ",
                first.0.dim(),
                v.0.dim()
            )));
        }
        sum += &v.0;
    }
    let k = views.len() as f64;
    Ok(ScoreMatrix(sum.mapv(|v| (v / k).clamp(0.0, 1.0))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn logits(a: Array2<f64>) -> LogitMatrix {
        LogitMatrix::new(a).unwrap()
    }

    #[test]
    fn singleton_scores_one() {
        let x = logits(array![[3.7]]);
        let s = wsddn_scores(&x, &logits(array![[-2.0]])).unwrap();
        assert_eq!(s.view(), array![[1.0]].view());
        assert_eq!(image_scores(&s), vec![1.0]);
    }

    #[test]
    fn uniform_two_by_four() {
        let x = logits(Array2::from_elem((2, 4), 0.3));
        let s = wsddn_scores(&x, &x).unwrap();
        for v in s.view().iter() {
            assert!((v - 0.125).abs() < 1e-15);
        }
        let phi = image_scores(&s);
        assert!((phi[0] - 0.5).abs() < 1e-15 && (phi[1] - 0.5).abs() < 1e-15);
        let l = mil_loss(&phi, &[1.0, 0.0]).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = logits(Array2::zeros((2, 3)));
        let b = logits(Array2::zeros((3, 2)));
        assert!(matches!(wsddn_scores(&a, &b), Err(Error::Shape(_))));
        assert!(mil_loss_grad(&a, &b, &[1.0, 0.0]).is_err());
        assert!(mil_loss(&[0.5], &[1.0, 0.0]).is_err());
        assert!(LogitMatrix::new(Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn mil_loss_perfect_prediction() {
        let l = mil_loss(&[1.0 - PROB_EPS], &[1.0]).unwrap();
        assert!((l - (-(1.0 - PROB_EPS).ln())).abs() < 1e-18);
        assert!((l - 1e-6).abs() < 1e-11);
        // unclamped φ = 1 behaves the same
        assert_eq!(mil_loss(&[1.0], &[1.0]).unwrap(), l);
    }

    #[test]
    fn gradient_zero_for_constant_output() {
        let (gc, gd) = mil_loss_grad(&logits(array![[0.4]]), &logits(array![[1.2]]), &[1.0]).unwrap();
        assert_eq!(gc[[0, 0]], 0.0);
        assert_eq!(gd[[0, 0]], 0.0);
    }

    #[test]
    fn gradient_symmetric_on_uniform_logits() {
        let x = logits(Array2::zeros((2, 3)));
        let (gc, gd) = mil_loss_grad(&x, &x, &[1.0, 1.0]).unwrap();
        for g in [&gc, &gd] {
            let first = g[[0, 0]];
            assert!(g.iter().all(|v| (v - first).abs() < 1e-15), "{g:?}");
        }
    }

    #[test]
    fn pseudo_label_cases() {
        let seed = ScoredBox::new(BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), 0.9, 2);
        let t = oicr_pseudo_labels(&[seed], &[seed.bbox], 3, 0.5).unwrap();
        assert_eq!(t.assigned_classes(), vec![2]);
        assert_eq!(t.weights, vec![0.9]);
        assert_eq!(t.regression_targets, vec![(0, [0.0, 0.0, 0.0, 0.0])]);

        // IoU 0.3 = 30 / 100 with a proposal covering 30% of the seed
        let low = BBox::new(0.0, 0.0, 3.0, 10.0).unwrap();
        assert!((iou(&low, &seed.bbox) - 0.3).abs() < 1e-15);
        let t = oicr_pseudo_labels(&[seed], &[low], 3, 0.5).unwrap();
        assert_eq!(t.assigned_classes(), vec![3]);
        assert_eq!(t.weights, vec![1.0]);
        assert!(t.regression_targets.is_empty());

        let t = oicr_pseudo_labels(&[], &[low, seed.bbox], 3, 0.5).unwrap();
        assert_eq!(t.assigned_classes(), vec![3, 3]);

        assert!(oicr_pseudo_labels(&[seed], &[], 3, 0.5).is_err());
    }

    #[test]
    fn oicr_loss_cases() {
        let target = RefinementTarget {
            labels: array![[1.0], [0.0]],
            weights: vec![1.0],
            regression_targets: vec![],
        };
        assert_eq!(oicr_loss(array![[1.0], [0.0]].view(), &target).unwrap(), 0.0);
        let l = oicr_loss(array![[0.5], [0.5]].view(), &target).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let zero_w = RefinementTarget {
            weights: vec![0.0],
            ..target.clone()
        };
        assert_eq!(oicr_loss(array![[0.1], [0.9]].view(), &zero_w).unwrap(), 0.0);
        assert!(oicr_loss(array![[0.5, 0.5], [0.5, 0.5]].view(), &target).is_err());
    }

    #[test]
    fn regression_loss_cases() {
        let t = [[0.1, -0.2, 0.3, 0.0]];
        assert_eq!(regression_loss(&t, &t, 1.0).unwrap(), 0.0);
        let z = [[0.0; 4]];
        assert_eq!(regression_loss(&[[0.5, 0.0, 0.0, 0.0]], &z, 1.0).unwrap(), 0.125);
        assert_eq!(regression_loss(&[[2.0, 0.0, 0.0, 0.0]], &z, 1.0).unwrap(), 1.5);
        assert_eq!(regression_loss(&[], &[], 1.0).unwrap(), 0.0);
        assert!(regression_loss(&t, &[], 1.0).is_err());
    }

    #[test]
    fn average_cases() {
        let a = ScoreMatrix::new(array![[0.2]]).unwrap();
        let b = ScoreMatrix::new(array![[0.4]]).unwrap();
        assert_eq!(multi_input_average(std::slice::from_ref(&a)).unwrap(), a);
        let m = multi_input_average(&[a.clone(), b]).unwrap();
        assert!((m.get(0, 0) - 0.3).abs() < 1e-15);
        assert!(multi_input_average(&[]).is_err());
        let wide = ScoreMatrix::new(array![[0.1, 0.2]]).unwrap();
        assert!(matches!(multi_input_average(&[a, wide]), Err(Error::Shape(_))));
    }

    #[test]
    fn offsets_round_trip() {
        let p = BBox::new(10.0, 20.0, 50.0, 40.0).unwrap();
        let t = BBox::new(12.0, 18.0, 60.0, 44.0).unwrap();
        let back = decode_offsets(&p, &encode_offsets(&p, &t));
        for (a, b) in [(back.x1, t.x1), (back.y1, t.y1), (back.x2, t.x2), (back.y2, t.y2)] {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
