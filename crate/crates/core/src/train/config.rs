use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::OptimizerConfig;
use crate::checkpoint;
use crate::data::Split;
use crate::error::{io_err, json_err, Error, Result};
use crate::losses::LossConfig;
use crate::network::{ArchitectureDescriptor, ModelConfig, Variant};
use crate::pruning::{DEFAULT_THRESHOLD, DEFAULT_WINDOW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Normal training plus progressive pruning.
    Psp,
    /// Plain training of a fixed (compact) architecture.
    Retrain,
}

/// Where the controller's TR/RL values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerSignal {
    /// Epoch means of the training losses.
    Train,
    /// Gradient-free losses on a fixed batch of training crops.
    Monitor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// A named variant or an explicit model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Custom(ModelConfig),
    Named { variant: Variant, num_classes: usize },
}

impl ModelChoice {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelChoice::Custom(c) => {
                c.validate()?;
                Ok(c.clone())
            }
            ModelChoice::Named { variant, num_classes } => ModelConfig::variant(*variant, *num_classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub model: ModelChoice,
    /// Retrain mode: descriptor JSON or checkpoint directory to take the
    /// architecture from.
    #[serde(default)]
    pub architecture: Option<PathBuf>,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub patch_size: [usize; 3],
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    #[serde(default = "default_calibration_count")]
    pub calibration_count: usize,
    /// Defaults to the variant's prune step.
    #[serde(default)]
    pub initial_p: Option<usize>,
    #[serde(default = "default_window")]
    pub controller_window: usize,
    #[serde(default = "default_threshold")]
    pub improvement_threshold: f64,
    /// Loss improvements at most this large count as converged (0 = exact).
    #[serde(default)]
    pub convergence_tolerance: f64,
    #[serde(default = "default_signal")]
    pub controller_signal: ControllerSignal,
    /// Size of the fixed monitoring batch.
    #[serde(default = "default_calibration_count")]
    pub monitor_count: usize,
    pub seed: u64,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Periodic checkpoint cadence in epochs (0 = only events and the end).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Periodic evaluation cadence in epochs (0 = off).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_split")]
    pub eval_split: Split,
    /// Caps the number of cases used by periodic evaluation.
    #[serde(default)]
    pub eval_cases: Option<usize>,
    #[serde(default = "default_tolerance")]
    pub nsd_tolerance_mm: f64,
}

fn default_calibration_count() -> usize {
    16
}
fn default_window() -> usize {
    DEFAULT_WINDOW
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_signal() -> ControllerSignal {
    ControllerSignal::Monitor
}
fn default_precision() -> Precision {
    Precision::F32
}
fn default_checkpoint_every() -> usize {
    10
}
fn default_eval_split() -> Split {
    Split::Test
}
fn default_tolerance() -> f64 {
    2.0
}

impl TrainConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(io_err(path))?;
        let mut cfg: TrainConfig = serde_json::from_slice(&text).map_err(json_err(path))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.dataset);
        fix(&mut cfg.output_dir);
        if let Some(a) = cfg.architecture.as_mut() {
            fix(a);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(json_err(path))?;
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model.resolve()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.iterations_per_epoch == 0 {
            return Err(Error::Config(
                "batch_size, epochs and iterations_per_epoch must be ≥ 1".into(),
            ));
        }
        let div = model.spatial_divisor();
        if self.patch_size.iter().any(|&p| p == 0 || p % div != 0) {
            return Err(Error::Config(format!(
                "patch size {:?} must be positive multiples of {div} for depth {}",
                self.patch_size, model.depth
            )));
        }
        if self.calibration_count == 0 || self.monitor_count == 0 {
            return Err(Error::Config("calibration_count and monitor_count must be ≥ 1".into()));
        }
        if self.controller_window == 0 || !(self.improvement_threshold >= 0.0) || !(self.convergence_tolerance >= 0.0) {
            return Err(Error::Config(
                "controller window must be ≥ 1, threshold and tolerance ≥ 0".into(),
            ));
        }
        if self.mode == Mode::Retrain && self.architecture.is_none() {
            return Err(Error::Config("retrain mode needs an architecture".into()));
        }
        if !(self.nsd_tolerance_mm >= 0.0) {
            return Err(Error::Config("NSD tolerance must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn initial_p(&self) -> Result<usize> {
        match self.mode {
            Mode::Retrain => Ok(0),
            Mode::Psp => Ok(self.initial_p.unwrap_or(self.model.resolve()?.default_initial_p())),
        }
    }

    /// Architecture descriptor for retrain mode.
    pub fn load_architecture(&self) -> Result<Option<ArchitectureDescriptor>> {
        let Some(path) = &self.architecture else {
            return Ok(None);
        };
        let desc = if path.is_dir() {
            checkpoint::read_manifest(path)?.descriptor
        } else {
            let text = fs::read(path).map_err(io_err(path))?;
            serde_json::from_slice(&text).map_err(json_err(path))?
        };
        desc.validate()?;
        Ok(Some(desc))
    }
}
