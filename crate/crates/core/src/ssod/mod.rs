//! Teacher-student mutual learning on a labeled/unlabeled split.
//!
//! The student is trained on labeled images (classification and regression)
//! and on unlabeled images whose pseudo labels come from the teacher
//! (classification only). Teacher predictions of classes absent from the
//! image-level labels are discarded. After every student step the teacher
//! follows by exponential moving average.

mod toy;

use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::data::{DatasetManifest, ImageRecord, SplitTag};
use crate::error::{Error, Result};
use crate::geom::ScoredBox;

pub use toy::{ToyDetector, ToySettings};

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudentState {
    pub theta_t: Vec<f64>,
    pub theta_s: Vec<f64>,
    pub alpha: f64,
    pub step: u64,
}

impl TeacherStudentState {
    /// Teacher and student both start from `params`.
    pub fn new(params: Vec<f64>, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(TeacherStudentState {
            theta_t: params.clone(),
            theta_s: params,
            alpha,
            step: 0,
        })
    }
}

/// `theta_t <- alpha * theta_t + (1 - alpha) * theta_s`.
pub fn ema_update(state: TeacherStudentState) -> Result<TeacherStudentState> {
    let TeacherStudentState {
        theta_t,
        theta_s,
        alpha,
        step,
    } = state;
    if theta_t.len() != theta_s.len() {
        return Err(Error::Shape(format!(
            "teacher has {} parameters, student {}",
            theta_t.len(),
            theta_s.len()
        )));
    }
    let beta = 1.0 - alpha;
    let theta_t = theta_t
        .iter()
        .zip(&theta_s)
        .map(|(&t, &s)| {
            // rounding may land one ulp outside the segment
            (alpha * t + beta * s).clamp(t.min(s), t.max(s))
        })
        .collect();
    Ok(TeacherStudentState {
        theta_t,
        theta_s,
        alpha,
        step: step + 1,
    })
}

/// Keeps predictions of an active class scoring at least `confidence_threshold`.
pub fn filter_pseudo_labels(
    predictions: &[ScoredBox],
    active_labels: &BTreeSet<usize>,
    confidence_threshold: f64,
) -> Vec<ScoredBox> {
    predictions
        .iter()
        .filter(|p| active_labels.contains(&p.class_id) && p.score >= confidence_threshold)
        .copied()
        .collect()
}

pub fn student_loss(l_sup: f64, l_unsup: f64, lambda_u: f64) -> Result<f64> {
    if !(l_sup >= 0.0 && l_unsup >= 0.0 && lambda_u >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "losses and weight must be non-negative, got {l_sup}, {l_unsup}, {lambda_u}"
        )));
    }
    Ok(l_sup + lambda_u * l_unsup)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsodConfig {
    /// Weight of the unsupervised term.
    pub lambda_u: f64,
    pub confidence_threshold: f64,
    /// EMA coefficient of the teacher.
    pub alpha: f64,
    /// Images per labeled and per unlabeled batch.
    pub batch_size: usize,
}

impl Default for SsodConfig {
    fn default() -> Self {
        SsodConfig {
            lambda_u: 2.0,
            confidence_threshold: 0.7,
            alpha: 0.9996,
            batch_size: 8,
        }
    }
}

impl SsodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_u = {}", self.lambda_u)));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::InvalidArgument(format!(
                "confidence_threshold = {}",
                self.confidence_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha = {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// What the mutual-learning loop needs from a detector.
pub trait DetectorAdapter {
    fn parameters(&self) -> Vec<f64>;

    fn set_parameters(&mut self, params: &[f64]) -> Result<()>;

    /// Must be deterministic given the parameters.
    fn predict(&self, image: &ImageRecord) -> Result<Vec<ScoredBox>>;

    /// Classification plus regression loss against each image's `pseudo_gt`.
    fn supervised_loss(&self, batch: &[ImageRecord]) -> Result<LossAndGrad>;

    /// Classification-only loss against each image's `pseudo_gt`; the
    /// gradient must vanish on regression parameters.
    fn unsupervised_cls_loss(&self, batch: &[ImageRecord]) -> Result<LossAndGrad>;
}

/// Image-space transform applied before prediction or loss evaluation.
/// Implementations must move `proposals` and `pseudo_gt` consistently.
pub trait Augmentation {
    fn apply(&self, image: &ImageRecord, rng: &mut dyn RngCore) -> ImageRecord;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Augmentation for Identity {
    fn apply(&self, image: &ImageRecord, _rng: &mut dyn RngCore) -> ImageRecord {
        image.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_stu: f64,
    /// Teacher boxes surviving the label and confidence filter.
    pub n_pseudo: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutualLearningOutcome {
    pub teacher: Vec<f64>,
    pub student: Vec<f64>,
    pub trace: Vec<StepLosses>,
}

pub fn run_mutual_learning<D: DetectorAdapter>(
    detector: &mut D,
    manifest: &DatasetManifest,
    cfg: &SsodConfig,
    n_steps: usize,
    step_size: f64,
    seed: u64,
) -> Result<MutualLearningOutcome> {
    run_mutual_learning_with(detector, manifest, cfg, n_steps, step_size, seed, &Identity, &Identity)
}

/// Mutual learning with explicit weak (teacher side, labeled batch) and
/// strong (student side, unlabeled batch) augmentations. On return the
/// detector holds the final teacher parameters.
#[allow(clippy::too_many_arguments)]
pub fn run_mutual_learning_with<D: DetectorAdapter>(
    detector: &mut D,
    manifest: &DatasetManifest,
    cfg: &SsodConfig,
    n_steps: usize,
    step_size: f64,
    seed: u64,
    weak: &dyn Augmentation,
    strong: &dyn Augmentation,
) -> Result<MutualLearningOutcome> {
    cfg.validate()?;
    if !manifest.is_partitioned() {
        return Err(Error::InvalidArgument(
            "every image needs a labeled/unlabeled split tag".into(),
        ));
    }
    let labeled: Vec<&ImageRecord> = manifest
        .images
        .iter()
        .filter(|im| im.split == Some(SplitTag::Labeled))
        .collect();
    let unlabeled: Vec<&ImageRecord> = manifest
        .images
        .iter()
        .filter(|im| im.split == Some(SplitTag::Unlabeled))
        .collect();
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("labeled subset is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = TeacherStudentState::new(detector.parameters(), cfg.alpha)?;
    let mut trace = Vec::with_capacity(n_steps);

    for _ in 0..n_steps {
        let lab_idx = sample(&mut rng, labeled.len(), cfg.batch_size.min(labeled.len()));
        let lab_batch: Vec<ImageRecord> = lab_idx.iter().map(|i| weak.apply(labeled[i], &mut rng)).collect();

        let mut pseudo_batch = Vec::new();
        let mut n_pseudo = 0;
        if !unlabeled.is_empty() {
            let un_idx = sample(&mut rng, unlabeled.len(), cfg.batch_size.min(unlabeled.len()));
            detector.set_parameters(&state.theta_t)?;
            for i in un_idx.iter() {
                let im = unlabeled[i];
                let preds = detector.predict(&weak.apply(im, &mut rng))?;
                let kept = filter_pseudo_labels(&preds, &im.active_labels, cfg.confidence_threshold);
                n_pseudo += kept.len();
                let mut target = im.clone();
                target.pseudo_gt = Some(kept);
                pseudo_batch.push(strong.apply(&target, &mut rng));
            }
        }

        detector.set_parameters(&state.theta_s)?;
        let sup = detector.supervised_loss(&lab_batch)?;
        let unsup = if pseudo_batch.is_empty() {
            LossAndGrad {
                value: 0.0,
                grad: vec![0.0; sup.grad.len()],
            }
        } else {
            detector.unsupervised_cls_loss(&pseudo_batch)?
        };
        if sup.grad.len() != state.theta_s.len() || unsup.grad.len() != state.theta_s.len() {
            return Err(Error::Shape("gradient length differs from parameter length".into()));
        }
        let l_stu = student_loss(sup.value, unsup.value, cfg.lambda_u)?;
        for ((p, gs), gu) in state.theta_s.iter_mut().zip(&sup.grad).zip(&unsup.grad) {
            *p -= step_size * (gs + cfg.lambda_u * gu);
        }
        state = ema_update(state)?;
        log::debug!(
            "ssod step {}: sup {:.5} unsup {:.5} total {:.5} pseudo {}",
            state.step,
            sup.value,
            unsup.value,
            l_stu,
            n_pseudo
        );
        trace.push(StepLosses {
            step: state.step,
            l_sup: sup.value,
            l_unsup: unsup.value,
            l_stu,
            n_pseudo,
        });
    }

    detector.set_parameters(&state.theta_t)?;
    Ok(MutualLearningOutcome {
        teacher: state.theta_t,
        student: state.theta_s,
        trace,
    })
}

/// Full-batch gradient descent on the supervised loss. Returns the loss
/// before each step.
pub fn fit_supervised<D: DetectorAdapter>(
    detector: &mut D,
    images: &[ImageRecord],
    n_steps: usize,
    step_size: f64,
) -> Result<Vec<f64>> {
    let mut params = detector.parameters();
    let mut losses = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let lg = detector.supervised_loss(images)?;
        for (p, g) in params.iter_mut().zip(&lg.grad) {
            *p -= step_size * g;
        }
        detector.set_parameters(&params)?;
        losses.push(lg.value);
    }
    Ok(losses)
}
