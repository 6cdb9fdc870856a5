//! Run configuration: one JSON file with every section, plus `key=value`
//! overrides from the command line. Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::camera::RigCalibration;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sweep::SweepConfig;
use crate::synth::Preset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub steps: usize,
    /// Per-iteration loss decay.
    pub gamma: f64,
    /// Peak learning rate of the one-cycle schedule.
    pub max_lr: f64,
    pub weight_decay: f64,
    /// Scenes per optimizer step (gradients are accumulated).
    pub batch_size: usize,
    /// Global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_fraction: f64,
    /// Seeds weight init and data order.
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            gamma: 0.9,
            max_lr: 5e-4,
            weight_decay: 1e-5,
            batch_size: 1,
            clip_norm: 1.0,
            warmup_fraction: 0.05,
            seed: 0,
            checkpoint_every: 500,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub preset: Preset,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            train_scenes: 200,
            test_scenes: 20,
            preset: Preset::Medium,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    /// Calibration file; the bundled square rig when absent.
    pub path: Option<PathBuf>,
    /// Resample every camera to `[width, height]`; native size when absent.
    pub image_size: Option<[usize; 2]>,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            path: None,
            image_size: Some([128, 128]),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rig: RigConfig,
    pub sweep: SweepConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Every field, defaults included.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Apply `section.key=value`. The value is parsed as JSON, falling back to
    /// a plain string, so `--set data.dir=out/data` works unquoted.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.trim().split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("override `{spec}`: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, specs: &[S]) -> Result<()> {
        specs.iter().try_for_each(|s| self.apply_override(s.as_ref()))
    }

    pub fn validate(&self) -> Result<()> {
        self.sweep.validate()?;
        self.model.validate()?;
        let t = &self.train;
        if !(t.gamma > 0.0 && t.gamma <= 1.0) {
            return Err(Error::Config(format!("train.gamma {} must lie in (0, 1]", t.gamma)));
        }
        if !(t.max_lr > 0.0 && t.max_lr.is_finite()) {
            return Err(Error::Config(format!("train.max_lr {} must be positive", t.max_lr)));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.warmup_fraction) {
            return Err(Error::Config("train.warmup_fraction must lie in [0, 1)".into()));
        }
        if t.weight_decay < 0.0 || t.clip_norm < 0.0 {
            return Err(Error::Config(
                "train.weight_decay and train.clip_norm must be >= 0".into(),
            ));
        }
        if let Some([w, h]) = self.rig.image_size {
            if w < 2 || h < 2 || w % 2 != 0 || h % 2 != 0 {
                return Err(Error::Config(format!("rig.image_size {w}x{h} must be even and >= 2")));
            }
        }
        Ok(())
    }

    /// The calibration described by the `rig` section.
    pub fn build_rig(&self) -> Result<RigCalibration> {
        let rig = match &self.rig.path {
            Some(p) => RigCalibration::load(p)?,
            None => RigCalibration::default_rig(),
        };
        Ok(match self.rig.image_size {
            Some([w, h]) => rig.with_resolution(w, h),
            None => rig,
        })
    }
}
