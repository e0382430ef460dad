//! `key = value` run configuration shared by every CLI command.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are an error.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fvreval::FvrConfig;
use crate::model::ModelConfig;
use crate::mtaug::AugConfig;
use crate::mttrain::TrainConfig;
use crate::veinsim::{PoseRange, SynthConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
    /// Checkpoint whose `pyramid` section replaces the frozen feature pyramid.
    pub feature_weights: Option<PathBuf>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub aug: AugConfig,
    pub fvr: FvrConfig,
    /// Fixed augmentation scale; random within `[scale_min, scale_max]` when unset.
    pub aug_scale: Option<f32>,
    pub variants: usize,
    pub train_per_class: usize,
    pub mt_aug: bool,
    pub grid_rows: usize,
    pub grid_dirs: usize,
}

impl RunConfig {
    pub fn new() -> Self {
        RunConfig {
            variants: 4,
            train_per_class: 5,
            mt_aug: true,
            grid_rows: 3,
            grid_dirs: 3,
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let path = || Some(PathBuf::from(value));
        match key {
            "data_dir" => self.data_dir = path(),
            "test_dir" => self.test_dir = path(),
            "checkpoint" => self.checkpoint = path(),
            "scores" => self.scores = path(),
            "metrics_log" => self.metrics_log = path(),
            "feature_weights" => self.feature_weights = path(),
            "seed" => {
                let s: u64 = num(key, value)?;
                self.synth.seed = s;
                self.model.seed = s;
                self.train.seed = s;
                self.fvr.seed = s;
            }
            "classes" => self.synth.classes = num(key, value)?,
            "samples" => self.synth.samples = num(key, value)?,
            "height" => {
                self.synth.height = num(key, value)?;
                self.model.height = self.synth.height;
            }
            "width" => {
                self.synth.width = num(key, value)?;
                self.model.width = self.synth.width;
            }
            "noise" => self.synth.noise = num(key, value)?,
            "tx_range" => self.synth.ranges.tx = num(key, value)?,
            "ty_range" => self.synth.ranges.ty = num(key, value)?,
            "rot_range" => self.synth.ranges.rot = num(key, value)?,
            "roll_range" => self.synth.ranges.roll = num(key, value)?,
            "keypoints" => self.model.keypoints = num(key, value)?,
            "downscale" => self.model.downscale = num(key, value)?,
            "widths" => {
                let v: Vec<usize> = value
                    .split(',')
                    .map(|p| num(key, p.trim()))
                    .collect::<std::result::Result<_, _>>()?;
                self.model.widths = v
                    .try_into()
                    .map_err(|_| format!("{key}: expected 4 comma-separated widths"))?;
            }
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "lr" => self.train.lr = num(key, value)?,
            "momentum" => self.train.momentum = num(key, value)?,
            "decay_epoch" => self.train.decay_epoch = num(key, value)?,
            "decay_factor" => self.train.decay_factor = num(key, value)?,
            "eq_weight" => self.train.eq_weight = num(key, value)?,
            "n_basis" => self.aug.n = num(key, value)?,
            "scale_min" => self.aug.scale_min = num(key, value)?,
            "scale_max" => self.aug.scale_max = num(key, value)?,
            "aug_probability" => self.aug.probability = num(key, value)?,
            "aug_scale" => self.aug_scale = Some(num(key, value)?),
            "variants" => self.variants = num(key, value)?,
            "train_per_class" => self.train_per_class = num(key, value)?,
            "mt_aug" => self.mt_aug = flag(key, value)?,
            "fvr_epochs" => self.fvr.epochs = num(key, value)?,
            "fvr_lr" => self.fvr.lr = num(key, value)?,
            "fvr_decay_epoch" => self.fvr.decay_epoch = num(key, value)?,
            "fvr_batch_classes" => self.fvr.batch_classes = num(key, value)?,
            "fvr_batch_samples" => self.fvr.batch_samples = num(key, value)?,
            "fvr_scale" => self.fvr.scale = num(key, value)?,
            "fvr_margin" => self.fvr.margin = num(key, value)?,
            "conventional_aug" => self.fvr.conventional_aug = flag(key, value)?,
            "all_impostors" => self.fvr.all_impostors = flag(key, value)?,
            "grid_rows" => self.grid_rows = num(key, value)?,
            "grid_dirs" => self.grid_dirs = num(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Overrides every seed, as `--seed` does.
    pub fn set_seed(&mut self, seed: u64) {
        self.set("seed", &seed.to_string()).expect("seed is numeric");
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.aug.validate()?;
        self.fvr.validate()?;
        let PoseRange { tx, ty, rot, roll } = self.synth.ranges;
        if [tx, ty, rot, roll, self.synth.noise].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("pose ranges and noise must be non-negative".into()));
        }
        if self.variants == 0 || self.grid_rows == 0 || self.grid_dirs == 0 {
            return Err(Error::Config("variants, grid_rows and grid_dirs must be positive".into()));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be positive".into()));
        }
        Ok(())
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse '{value}'"))
}

fn flag(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got '{value}'")),
    }
}
