//! `sos`: one subcommand per pipeline stage, plus `pipeline` for the whole
//! chain on the synthetic benchmark.
//!
//! Exit status is 0 on success, 1 for invalid input or configuration and 2
//! for I/O failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sos_core::config::{parse_overrides, resolve_config, PipelineConfig, Preset};
use sos_core::data::{
    attach_scores, detections_to_jsonl, generate_synthetic_dataset, manifest_to_bytes, parse_detections_jsonl,
    parse_manifest, parse_scores_jsonl, read_text, scores_to_jsonl, write_text,
};
use sos_core::eval::evaluate_manifest;
use sos_core::jsonfmt;
use sos_core::mining::mine_seed_boxes;
use sos_core::pgf::pgf_filter;
use sos_core::pipeline::{map_images, run_pipeline};
use sos_core::split::{apply_split, parse_roi_losses_jsonl, partition_dataset, split_loss_image};
use sos_core::ssod::{fit_supervised, run_mutual_learning, DetectorAdapter, StepLosses, ToyDetector};
use sos_core::{DatasetManifest, Error, ImageDetections, Result};

#[derive(Parser)]
#[command(
    name = "sos",
    version,
    about = "Pseudo-supervision pipeline for weakly supervised detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; any subset of the pipeline config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hyperparameter preset: voc2007, voc2012, coco or synthetic.
    #[arg(long)]
    preset: Option<Preset>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-image stages.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: manifest.json, scores.jsonl,
    /// ground_truth.json and ground_truth.jsonl.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Mine seed boxes from RoI scores.
    Mine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Filter stage-one detections into the manifest's pseudo boxes.
    Pgf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detections: PathBuf,
    },
    /// Per-RoI losses of the toy detector fitted on the manifest's pseudo boxes.
    RoiLosses {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Tag the `k` lowest-loss images as labeled.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Per-image RoI loss breakdowns.
        #[arg(long)]
        losses: PathBuf,
        /// Overrides the config's split_k.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Teacher-student training of the toy detector on a split manifest.
    SsodSim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        /// Initial parameters as a JSON array; fitted on the labeled
        /// images when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Also write the final teacher's detections as JSON-lines.
        #[arg(long)]
        detections_out: Option<PathBuf>,
    },
    /// Score detections against the manifest's boxes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Manifest whose pseudo_gt holds the ground truth.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detections: PathBuf,
    },
    /// Run every stage on the synthetic benchmark.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

fn config(common: &Common, fallback: Preset) -> Result<PipelineConfig> {
    let overrides = match &common.config {
        Some(p) => Some(parse_overrides(&read_text(p)?)?),
        None => None,
    };
    resolve_config(overrides.as_ref(), common.preset, fallback)
}

fn emit(out: Option<&Path>, bytes: impl AsRef<[u8]>) -> Result<()> {
    match out {
        Some(p) => write_text(p, bytes),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes.as_ref()).map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            })
        }
    }
}

fn load(path: &Path) -> Result<DatasetManifest> {
    parse_manifest(&read_text(path)?)
}

#[derive(Serialize, Deserialize)]
struct SsodOutput {
    teacher: Vec<f64>,
    student: Vec<f64>,
    trace: Vec<StepLosses>,
}

fn toy_detector(manifest: &DatasetManifest, scores: &Path) -> Result<ToyDetector> {
    let sets = attach_scores(manifest, parse_scores_jsonl(&read_text(scores)?)?)?;
    ToyDetector::new(manifest, &sets)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, dir } => {
            let cfg = config(&common, Preset::Synthetic)?;
            let s = &cfg.synthetic;
            let d = generate_synthetic_dataset(common.seed, s.n_images, s.n_classes, s.noise)?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            write_text(dir.join("manifest.json"), manifest_to_bytes(&d.manifest)?)?;
            write_text(dir.join("scores.jsonl"), scores_to_jsonl(&d.scores)?)?;
            write_text(
                dir.join("ground_truth.json"),
                manifest_to_bytes(&d.ground_truth_manifest())?,
            )?;
            write_text(dir.join("ground_truth.jsonl"), detections_to_jsonl(&d.ground_truth)?)?;
            write_text(dir.join("config.json"), jsonfmt::to_pretty_bytes(&cfg)?)
        }
        Command::Mine {
            common,
            manifest,
            scores,
        } => {
            let cfg = config(&common, Preset::Voc2007)?;
            let m = load(&manifest)?;
            let sets = attach_scores(&m, parse_scores_jsonl(&read_text(&scores)?)?)?;
            let index = m.index_by_id();
            let out = map_images(&sets, common.jobs, |s| {
                let im = &m.images[index[s.image_id.as_str()]];
                Ok(ImageDetections {
                    image_id: s.image_id.clone(),
                    detections: mine_seed_boxes(&s.proposals, &s.scores, &im.active_labels, &cfg.mining)?,
                })
            })?;
            emit(common.out.as_deref(), detections_to_jsonl(&out)?)
        }
        Command::Pgf {
            common,
            manifest,
            detections,
        } => {
            let cfg = config(&common, Preset::Voc2007)?;
            let mut m = load(&manifest)?;
            let dets = parse_detections_jsonl(&read_text(&detections)?)?;
            let index = m.index_by_id();
            let mut per_image = vec![None; m.images.len()];
            for d in dets {
                let &i = index
                    .get(d.image_id.as_str())
                    .ok_or_else(|| Error::Validation(format!("detections for unknown image {:?}", d.image_id)))?;
                per_image[i] = Some(d.detections);
            }
            let n = m.n_classes();
            for (im, d) in m.images.iter_mut().zip(per_image) {
                let d = d.unwrap_or_default();
                im.pseudo_gt = Some(pgf_filter(&d, &im.active_labels, n, &cfg.pgf)?);
            }
            emit(common.out.as_deref(), manifest_to_bytes(&m)?)
        }
        Command::RoiLosses {
            common,
            manifest,
            scores,
        } => {
            let cfg = config(&common, Preset::Voc2007)?;
            let m = load(&manifest)?;
            let mut det = toy_detector(&m, &scores)?;
            fit_supervised(
                &mut det,
                &m.images,
                cfg.training.fsod_steps,
                cfg.training.fsod_step_size,
            )?;
            let out = map_images(&m.images, common.jobs, |im| det.roi_losses(im))?;
            emit(common.out.as_deref(), jsonfmt::to_jsonl(&out)?)
        }
        Command::Split {
            common,
            manifest,
            losses,
            k,
        } => {
            let cfg = config(&common, Preset::Voc2007)?;
            let m = load(&manifest)?;
            let breakdowns = parse_roi_losses_jsonl(&read_text(&losses)?)?;
            let records = breakdowns.iter().map(split_loss_image).collect::<Result<Vec<_>>>()?;
            let (labeled, unlabeled) = partition_dataset(&records, k.unwrap_or(cfg.split_k))?;
            emit(
                common.out.as_deref(),
                manifest_to_bytes(&apply_split(&m, &labeled, &unlabeled)?)?,
            )
        }
        Command::SsodSim {
            common,
            manifest,
            scores,
            init,
            detections_out,
        } => {
            let cfg = config(&common, Preset::Voc2007)?;
            let m = load(&manifest)?;
            let mut det = toy_detector(&m, &scores)?;
            match init {
                Some(p) => {
                    let params: Vec<f64> = serde_json::from_str(&read_text(&p)?)
                        .map_err(|e| Error::Schema(format!("initial parameters: {e}")))?;
                    det.set_parameters(&params)?;
                }
                None => {
                    let labeled: Vec<_> = m
                        .images
                        .iter()
                        .filter(|im| im.split == Some(sos_core::data::SplitTag::Labeled))
                        .cloned()
                        .collect();
                    fit_supervised(&mut det, &labeled, cfg.training.fsod_steps, cfg.training.fsod_step_size)?;
                }
            }
            let o = run_mutual_learning(
                &mut det,
                &m,
                &cfg.ssod,
                cfg.training.ssod_steps,
                cfg.training.ssod_step_size,
                common.seed,
            )?;
            if let Some(p) = detections_out {
                let dets = map_images(&m.images, common.jobs, |im| {
                    Ok(ImageDetections {
                        image_id: im.image_id.clone(),
                        detections: det.predict(im)?,
                    })
                })?;
                write_text(p, detections_to_jsonl(&dets)?)?;
            }
            let out = SsodOutput {
                teacher: o.teacher,
                student: o.student,
                trace: o.trace,
            };
            emit(common.out.as_deref(), jsonfmt::to_pretty_bytes(&out)?)
        }
        Command::Eval {
            common,
            manifest,
            detections,
        } => {
            let cfg = config(&common, Preset::Voc2007)?;
            let m = load(&manifest)?;
            let dets = parse_detections_jsonl(&read_text(&detections)?)?;
            let r = evaluate_manifest(&dets, &m, &cfg.eval_thresholds)?;
            emit(common.out.as_deref(), jsonfmt::to_pretty_bytes(&r)?)
        }
        Command::Pipeline { common } => {
            let cfg = config(&common, Preset::Synthetic)?;
            let r = run_pipeline(&cfg, common.seed, common.jobs)?;
            emit(common.out.as_deref(), jsonfmt::to_pretty_bytes(&r)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SOS_LOG", "error"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("sos: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
