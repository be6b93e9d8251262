//! Run configuration: one JSON document covering every component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ann::SearchParams;
use crate::bank::UpdateSchedule;
use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::net::{ModelSpec, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Nearest-neighbour Gaussian kernel loss.
    #[default]
    Kernel,
    /// Cross-entropy through a linear softmax head.
    Softmax,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub kernel: KernelConfig,
    pub train: TrainConfig,
    pub schedule: UpdateSchedule,
    pub search: SearchParams,
    pub model: ModelSpec,
    pub loss: LossKind,
    /// Recall@K cut-offs reported in transfer evaluation.
    pub k_values: Vec<usize>,
    /// Candidate widths for sigma tuning.
    pub sigma_grid: Vec<f64>,
    /// Tune sigma on the validation split before training.
    pub tune_sigma: bool,
    /// Share of classes used for training under the transfer protocol.
    pub transfer_fraction: f64,
    /// Per-class validation / test shares when a dataset carries no tags.
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Class names the bank was trained on; filled in by training.
    pub trained_classes: Vec<String>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kernel: KernelConfig::default(),
            train: TrainConfig::default(),
            schedule: UpdateSchedule::default(),
            search: SearchParams::default(),
            model: ModelSpec::default(),
            loss: LossKind::Kernel,
            k_values: vec![1, 2, 4, 8],
            sigma_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
            tune_sigma: false,
            transfer_fraction: 0.5,
            val_fraction: 0.2,
            test_fraction: 0.0,
            trained_classes: Vec::new(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every component; `input_dim` may still be 0 (filled from data).
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.train.validate()?;
        self.schedule.validate()?;
        self.search.validate()?;
        if self.model.input_dim > 0 {
            self.model.validate()?;
        }
        if self.k_values.contains(&0) {
            return Err(Error::config("k_values must be positive"));
        }
        if self.sigma_grid.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("sigma_grid values must be positive"));
        }
        if !(self.transfer_fraction > 0.0 && self.transfer_fraction < 1.0) {
            return Err(Error::config("transfer_fraction must be in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.val_fraction)
            || !(0.0..1.0).contains(&self.test_fraction)
            || self.val_fraction + self.test_fraction >= 1.0
        {
            return Err(Error::config("val_fraction + test_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}
