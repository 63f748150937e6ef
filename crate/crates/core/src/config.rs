//! Pipeline hyperparameters, named presets and JSON overrides.
//!
//! A config file is a JSON object shaped like [`PipelineConfig`] in which
//! every field is optional. Objects merge recursively into the preset and
//! any other value replaces the preset's, so applying the same overrides
//! twice gives the same result as applying them once.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::coco_thresholds;
use crate::mining::MiningConfig;
use crate::pgf::PgfConfig;
use crate::split::presets;
use crate::ssod::SsodConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Voc2007,
    Voc2012,
    Coco,
    Synthetic,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Voc2007, Preset::Voc2012, Preset::Coco, Preset::Synthetic];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Voc2007 => "voc2007",
            Preset::Voc2012 => "voc2012",
            Preset::Coco => "coco",
            Preset::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset {s:?}")))
    }
}

/// Toy detector training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Full-batch steps on the filtered pseudo boxes.
    pub fsod_steps: usize,
    /// Mutual-learning steps.
    pub ssod_steps: usize,
    pub fsod_step_size: f64,
    pub ssod_step_size: f64,
}

/// Shape of the generated benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_images: usize,
    /// Held-out images used for every evaluation.
    pub n_test_images: usize,
    pub n_classes: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub mining: MiningConfig,
    pub pgf: PgfConfig,
    pub ssod: SsodConfig,
    pub split_k: usize,
    pub eval_thresholds: Vec<f64>,
    pub training: TrainingConfig,
    pub synthetic: SyntheticConfig,
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = PipelineConfig {
            preset,
            mining: MiningConfig::default(),
            pgf: PgfConfig::VOC,
            ssod: SsodConfig::default(),
            split_k: presets::VOC2007_K,
            eval_thresholds: coco_thresholds(),
            training: TrainingConfig {
                fsod_steps: 300,
                ssod_steps: 300,
                fsod_step_size: 0.5,
                ssod_step_size: 0.2,
            },
            synthetic: SyntheticConfig {
                n_images: 200,
                n_test_images: 100,
                n_classes: 5,
                noise: 0.3,
            },
        };
        match preset {
            Preset::Voc2007 => {}
            Preset::Voc2012 => cfg.split_k = presets::VOC2012_K,
            Preset::Coco => {
                cfg.pgf = PgfConfig::COCO;
                cfg.split_k = presets::COCO_K;
            }
            Preset::Synthetic => {
                cfg.split_k = 100;
                cfg.ssod.alpha = 0.99;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.mining.validate()?;
        self.pgf.validate()?;
        self.ssod.validate()?;
        if self.eval_thresholds.is_empty() {
            return Err(Error::InvalidArgument("eval_thresholds is empty".into()));
        }
        if let Some(t) = self.eval_thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::InvalidArgument(format!("eval threshold {t} outside (0, 1]")));
        }
        let t = &self.training;
        for (name, v) in [
            ("fsod_step_size", t.fsod_step_size),
            ("ssod_step_size", t.ssod_step_size),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} = {v}")));
            }
        }
        let s = &self.synthetic;
        if s.n_images == 0 || s.n_test_images == 0 || s.n_classes == 0 {
            return Err(Error::InvalidArgument("synthetic sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&s.noise) {
            return Err(Error::InvalidArgument(format!("synthetic noise = {}", s.noise)));
        }
        Ok(())
    }

    /// Merges `overrides` into this config. A `preset` key in the overrides
    /// only renames the preset; use [`resolve_config`] to start from it.
    pub fn apply(&self, overrides: &Value) -> Result<PipelineConfig> {
        let Value::Object(patch) = overrides else {
            return Err(Error::Schema("config must be a JSON object".into()));
        };
        let mut base = serde_json::to_value(self).expect("config serializes");
        merge(&mut base, patch);
        let cfg: PipelineConfig = serde_json::from_value(base).map_err(|e| Error::from_json("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::preset(Preset::Voc2007)
    }
}

fn merge(base: &mut Value, patch: &Map<String, Value>) {
    let Value::Object(target) = base else {
        *base = Value::Object(patch.clone());
        return;
    };
    for (k, v) in patch {
        match (target.get_mut(k), v) {
            (Some(slot @ Value::Object(_)), Value::Object(sub)) => merge(slot, sub),
            _ => {
                target.insert(k.clone(), v.clone());
            }
        }
    }
}

pub fn parse_overrides(text: &str) -> Result<Value> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::from_json("config", e))?;
    if !v.is_object() {
        return Err(Error::Schema("config must be a JSON object".into()));
    }
    Ok(v)
}

/// Builds a config from an optional override document. The preset is taken
/// from `preset` if given, else from the document's `preset` field, else
/// `fallback`.
pub fn resolve_config(overrides: Option<&Value>, preset: Option<Preset>, fallback: Preset) -> Result<PipelineConfig> {
    let from_doc = match overrides.and_then(|v| v.get("preset")) {
        Some(p) => Some(serde_json::from_value::<Preset>(p.clone()).map_err(|e| Error::from_json("config preset", e))?),
        None => None,
    };
    let chosen = preset.or(from_doc).unwrap_or(fallback);
    let base = PipelineConfig::preset(chosen);
    let mut cfg = match overrides {
        Some(v) => base.apply(v)?,
        None => base,
    };
    cfg.preset = chosen;
    Ok(cfg)
}

/// Parses a complete or partial config document over the default preset.
pub fn parse_pipeline_config(text: &str) -> Result<PipelineConfig> {
    let v = parse_overrides(text)?;
    resolve_config(Some(&v), None, Preset::Voc2007)
}
