//! Pseudo-supervision toolkit for weakly supervised object detection.
//!
//! The crate turns image-level labels plus stage-one RoI scores into box
//! supervision: seed mining ([`mining`]), pseudo-groundtruth filtering
//! ([`pgf`]), a loss-ranked clean/noisy split ([`split`]) and teacher-student
//! self-training ([`ssod`]). [`milhead`] holds the MIL/OICR loss kernels,
//! [`eval`] computes mAP and [`pipeline`] chains everything on a seeded
//! synthetic benchmark.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geom;
pub mod jsonfmt;
pub mod milhead;
pub mod mining;
pub mod pgf;
pub mod pipeline;
pub mod split;
pub mod ssod;

pub use config::{PipelineConfig, Preset};
pub use data::{DatasetManifest, ImageDetections, ImageRecord, ScoredBoxSet};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalResult};
pub use geom::{containment_ratio, iou, nms, BBox, ScoredBox};
pub use mining::{mine_seed_boxes, MiningConfig};
pub use pgf::{pgf_filter, PgfConfig};
pub use pipeline::{run_pipeline, PipelineReport};
pub use ssod::{DetectorAdapter, SsodConfig, ToyDetector};
