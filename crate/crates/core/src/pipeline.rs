//! End-to-end run on the synthetic benchmark.
//!
//! Stages, in order:
//! 1. mine seed boxes from the stage-one RoI scores of every training image;
//! 2. filter the seeds into pseudo boxes and fit the toy detector on them;
//! 3. rank training images by split loss and tag the `split_k` cleanest as
//!    labeled;
//! 4. run teacher-student mutual learning from the stage-2 parameters.
//!
//! Each stage is scored on a held-out synthetic test set. The seed stage has
//! no image labels at test time, so it mines with every class active.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Preset};
use crate::data::{generate_synthetic_dataset, DatasetManifest, ImageDetections, ScoredBoxSet, SyntheticDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::geom::ScoredBox;
use crate::mining::mine_seed_boxes;
use crate::pgf::pgf_filter;
use crate::split::{apply_split, partition_dataset, split_loss_image};
use crate::ssod::{fit_supervised, run_mutual_learning, DetectorAdapter, StepLosses, ToyDetector};

/// Offset between the training seed and the held-out set's seed.
const TEST_SEED_OFFSET: u64 = 0x5EED_0F7E_5700_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub eval: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub preset: Preset,
    pub seed: u64,
    pub n_train_images: usize,
    pub n_test_images: usize,
    pub n_seed_boxes: usize,
    pub n_pseudo_boxes: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub fsod_final_loss: Option<f64>,
    pub ssod_final_step: Option<StepLosses>,
    /// `mined_seeds`, `pgf_retrain`, `ssod`, in that order.
    pub stages: Vec<StageReport>,
}

impl PipelineReport {
    pub fn stage(&self, name: &str) -> Option<&EvalResult> {
        self.stages.iter().find(|s| s.stage == name).map(|s| &s.eval)
    }

    pub fn map50(&self, name: &str) -> Option<f64> {
        self.stage(name).and_then(|e| e.map50)
    }
}

/// Runs `f` over `items` in order, on `jobs` threads when `jobs > 1`.
pub fn map_images<T, U, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

fn rename_images(mut d: SyntheticDataset, prefix: &str) -> SyntheticDataset {
    for im in &mut d.manifest.images {
        im.image_id = format!("{prefix}{}", im.image_id);
    }
    for g in &mut d.ground_truth {
        g.image_id = format!("{prefix}{}", g.image_id);
    }
    for s in &mut d.scores {
        s.image_id = format!("{prefix}{}", s.image_id);
    }
    d
}

fn detections_of<D: DetectorAdapter + Sync>(
    det: &D,
    manifest: &DatasetManifest,
    jobs: usize,
) -> Result<Vec<ImageDetections>> {
    map_images(&manifest.images, jobs, |im| {
        Ok(ImageDetections {
            image_id: im.image_id.clone(),
            detections: det.predict(im)?,
        })
    })
}

fn mine_all(
    sets: &[ScoredBoxSet],
    labels: &[BTreeSet<usize>],
    cfg: &PipelineConfig,
    jobs: usize,
) -> Result<Vec<Vec<ScoredBox>>> {
    let pairs: Vec<(&ScoredBoxSet, &BTreeSet<usize>)> = sets.iter().zip(labels).collect();
    map_images(&pairs, jobs, |(s, l)| {
        mine_seed_boxes(&s.proposals, &s.scores, l, &cfg.mining)
    })
}

pub fn run_pipeline(cfg: &PipelineConfig, seed: u64, jobs: usize) -> Result<PipelineReport> {
    cfg.validate()?;
    let syn = &cfg.synthetic;
    let train = generate_synthetic_dataset(seed, syn.n_images, syn.n_classes, syn.noise)?;
    let test = rename_images(
        generate_synthetic_dataset(
            seed.wrapping_add(TEST_SEED_OFFSET),
            syn.n_test_images,
            syn.n_classes,
            syn.noise,
        )?,
        "test_",
    );
    let thresholds = &cfg.eval_thresholds;
    let categories = &train.manifest.categories;
    let score_eval = |dets: &[ImageDetections]| evaluate(dets, &test.ground_truth, categories, thresholds);
    let mut stages = Vec::new();

    // stage 1: seeds
    let all_classes: BTreeSet<usize> = (0..syn.n_classes).collect();
    let test_labels = vec![all_classes; test.scores.len()];
    let test_seeds = mine_all(&test.scores, &test_labels, cfg, jobs)?;
    let test_dets: Vec<ImageDetections> = test
        .manifest
        .images
        .iter()
        .zip(test_seeds)
        .map(|(im, d)| ImageDetections {
            image_id: im.image_id.clone(),
            detections: d,
        })
        .collect();
    stages.push(StageReport {
        stage: "mined_seeds".into(),
        eval: score_eval(&test_dets)?,
    });

    let train_labels: Vec<BTreeSet<usize>> = train
        .manifest
        .images
        .iter()
        .map(|im| im.active_labels.clone())
        .collect();
    let seeds = mine_all(&train.scores, &train_labels, cfg, jobs)?;
    let n_seed_boxes = seeds.iter().map(Vec::len).sum();

    // stage 2: pseudo boxes and fully supervised fit
    let mut manifest = train.manifest.clone();
    for (im, s) in manifest.images.iter_mut().zip(&seeds) {
        im.pseudo_gt = Some(pgf_filter(s, &im.active_labels, syn.n_classes, &cfg.pgf)?);
    }
    let n_pseudo_boxes = manifest.images.iter().map(|im| im.pseudo_gt().len()).sum();
    log::info!("pipeline: {n_seed_boxes} seeds, {n_pseudo_boxes} pseudo boxes");

    let mut det = ToyDetector::new(&manifest, &train.scores)?;
    det.register(&test.manifest, &test.scores)?;
    let losses = fit_supervised(
        &mut det,
        &manifest.images,
        cfg.training.fsod_steps,
        cfg.training.fsod_step_size,
    )?;
    stages.push(StageReport {
        stage: "pgf_retrain".into(),
        eval: score_eval(&detections_of(&det, &test.manifest, jobs)?)?,
    });

    // stage 3: split
    let records = map_images(&manifest.images, jobs, |im| split_loss_image(&det.roi_losses(im)?))?;
    let k = cfg.split_k.min(records.len());
    if k < cfg.split_k {
        log::info!("pipeline: split_k {} capped at {} images", cfg.split_k, k);
    }
    let (labeled, unlabeled) = partition_dataset(&records, k)?;
    let manifest = apply_split(&manifest, &labeled, &unlabeled)?;

    // stage 4: mutual learning
    let outcome = run_mutual_learning(
        &mut det,
        &manifest,
        &cfg.ssod,
        cfg.training.ssod_steps,
        cfg.training.ssod_step_size,
        seed,
    )?;
    stages.push(StageReport {
        stage: "ssod".into(),
        eval: score_eval(&detections_of(&det, &test.manifest, jobs)?)?,
    });

    Ok(PipelineReport {
        preset: cfg.preset,
        seed,
        n_train_images: train.manifest.images.len(),
        n_test_images: test.manifest.images.len(),
        n_seed_boxes,
        n_pseudo_boxes,
        n_labeled: labeled.len(),
        n_unlabeled: unlabeled.len(),
        fsod_final_loss: losses.last().copied(),
        ssod_final_step: outcome.trace.last().cloned(),
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PipelineConfig {
        let mut cfg = PipelineConfig::preset(Preset::Synthetic);
        cfg.synthetic.n_images = 20;
        cfg.synthetic.n_test_images = 10;
        cfg.split_k = 10;
        cfg.training.fsod_steps = 20;
        cfg.training.ssod_steps = 10;
        cfg
    }

    #[test]
    fn small_run_reports_every_stage() {
        let r = run_pipeline(&small(), 3, 1).unwrap();
        let names: Vec<&str> = r.stages.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(names, ["mined_seeds", "pgf_retrain", "ssod"]);
        assert_eq!((r.n_labeled, r.n_unlabeled), (10, 10));
        for s in &r.stages {
            let m = s.eval.map50.unwrap();
            assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn parallel_run_matches_sequential() {
        assert_eq!(
            run_pipeline(&small(), 5, 1).unwrap(),
            run_pipeline(&small(), 5, 3).unwrap()
        );
    }
}
