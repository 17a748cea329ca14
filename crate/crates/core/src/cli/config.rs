use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anatomical::SegmenterConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::hspl::{FocalNorm, LossWeights};
use crate::nn::{Dims, StepLr};
use crate::synthetic::PhantomSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Rpn,
    RpnFfm,
    #[default]
    RpnFfmHspl,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Rpn, Ablation::RpnFfm, Ablation::RpnFfmHspl];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Rpn => "rpn",
            Ablation::RpnFfm => "rpn_ffm",
            Ablation::RpnFfmHspl => "rpn_ffm_hspl",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid("ablation", format!("`{s}` is not one of rpn, rpn_ffm, rpn_ffm_hspl")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: String,
    pub lr: f32,
    pub momentum: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: "sgd".into(),
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub kind: String,
    pub step_size: usize,
    pub gamma: f32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            kind: "step".into(),
            step_size: 50,
            gamma: 0.5,
        }
    }
}

impl SchedulerConfig {
    pub fn step_lr(&self) -> StepLr {
        StepLr {
            step_size: self.step_size,
            gamma: self.gamma,
        }
    }
}

/// Crop sampling and bookkeeping for the training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Detector training crop, in interpolated voxels.
    pub crop_size: Dims,
    /// Balanced crops (half positive) per detector epoch.
    pub crops_per_epoch: usize,
    pub focal_norm: FocalNorm,
    pub pos_radius_mm: f64,
    /// Joint gradient-norm ceiling for detector updates.
    pub grad_clip: Option<f64>,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub segmenter_epochs: usize,
    pub segmenter_crops_per_epoch: usize,
    pub segmenter_lr: f32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            crop_size: [32, 32, 32],
            crops_per_epoch: 32,
            focal_norm: FocalNorm::Positives,
            pos_radius_mm: 1.0,
            grad_clip: Some(1.0),
            checkpoint_every: 10,
            segmenter_epochs: 20,
            segmenter_crops_per_epoch: 8,
            segmenter_lr: 0.1,
        }
    }
}

/// Options for `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub normal_fraction: f64,
    pub phantom: PhantomSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            normal_fraction: 0.2,
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub paths: PathsConfig,
    pub detector: DetectorConfig,
    pub segmenter: SegmenterConfig,
    pub losses: LossWeights,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
    pub training: TrainingConfig,
    pub synth: SynthConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Commands that evaluate fail when sensitivity drops below this.
    pub min_sensitivity: Option<f64>,
    /// Commands that evaluate fail when FP_avg exceeds this.
    pub max_fp_avg: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            detector: DetectorConfig::default(),
            segmenter: SegmenterConfig::default(),
            losses: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            scheduler: SchedulerConfig::default(),
            training: TrainingConfig::default(),
            synth: SynthConfig::default(),
            batch_size: 1,
            epochs: 100,
            seed: 0,
            ablation: Ablation::RpnFfmHspl,
            min_sensitivity: None,
            max_fp_avg: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the path ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.segmenter.validate()?;
        self.losses.validate()?;
        if self.batch_size != 1 {
            return Err(Error::invalid("batch_size", "only batch size 1 is supported"));
        }
        if !self.optimizer.kind.eq_ignore_ascii_case("sgd") {
            return Err(Error::invalid("optimizer.kind", "only sgd is supported"));
        }
        if !self.scheduler.kind.eq_ignore_ascii_case("step") {
            return Err(Error::invalid("scheduler.kind", "only step is supported"));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) || !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(Error::invalid("optimizer", "lr must be positive and momentum in [0, 1)"));
        }
        let t = &self.training;
        if t.crops_per_epoch == 0 || t.crops_per_epoch % 2 != 0 {
            return Err(Error::invalid("training.crops_per_epoch", "must be a positive even number"));
        }
        let d = self.detector.divisor();
        if t.crop_size.iter().any(|&c| c == 0 || c % d != 0) {
            return Err(Error::invalid("training.crop_size", format!("must be a positive multiple of {d}")));
        }
        if !(t.pos_radius_mm >= 0.0) {
            return Err(Error::invalid("training.pos_radius_mm", "must be non-negative"));
        }
        Ok(())
    }

    /// Detector settings and loss weights after applying the ablation arm.
    pub fn arm(&self) -> (DetectorConfig, LossWeights) {
        let mut det = self.detector.clone();
        let mut w = self.losses.clone();
        match self.ablation {
            Ablation::Rpn => {
                det.fusion = false;
                w.lambda_con = 0.0;
            }
            Ablation::RpnFfm => w.lambda_con = 0.0,
            Ablation::RpnFfmHspl => {}
        }
        (det, w)
    }

    /// Settings sized for the 96x96x48 phantoms of the `synth` command.
    pub fn synthetic_benchmark() -> Self {
        let mut cfg = Self::default();
        cfg.detector.base_channels = 8;
        cfg.detector.fused_channels = 8;
        cfg.detector.z_slices = 96;
        cfg.detector.window = [96, 96, 96];
        cfg.epochs = 60;
        cfg.optimizer.lr = 0.02;
        cfg.scheduler.step_size = 30;
        cfg.training.crop_size = [32, 32, 16];
        cfg.training.crops_per_epoch = 32;
        cfg.training.grad_clip = Some(2.0);
        cfg.synth.n_subjects = 40;
        cfg.synth.normal_fraction = 0.0;
        cfg
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths.output_dir.join("checkpoints")
    }

    pub fn detector_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("detector.ckpt")
    }

    pub fn segmenter_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("segmenter.ckpt")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.paths.output_dir.join("logs").join("losses.csv")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.paths.output_dir.join("reports")
    }

    pub fn curves_dir(&self) -> PathBuf {
        self.paths.output_dir.join("curves")
    }
}
