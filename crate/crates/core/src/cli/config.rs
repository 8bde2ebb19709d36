use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::data::SynthConfig;
use crate::error::{config_err, Error, Result};
use crate::losses::MultiTaskLossConfig;
use crate::model::NetworkConfig;
use crate::semisup::{SemiSupConfig, TrainConfig};

/// Which tasks are trained and whether unlabelled records are used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Segmentation only; the class loss has weight 0.
    SingleTaskSeg,
    /// Classification only; the segmentation loss has weight 0.
    SingleTaskCls,
    /// Both tasks on the labelled records.
    #[default]
    MultiTaskManual,
    /// Both tasks plus self-training on the unlabelled records.
    MultiTaskSemisup,
}

impl Strategy {
    /// The loss weights this strategy trains with.
    pub fn loss(self, base: &MultiTaskLossConfig) -> MultiTaskLossConfig {
        let mut l = base.clone();
        match self {
            Strategy::SingleTaskSeg => l.weight_cls = 0.0,
            Strategy::SingleTaskCls => l.weight_seg = 0.0,
            Strategy::MultiTaskManual | Strategy::MultiTaskSemisup => {}
        }
        l
    }
}

/// Dataset layout knobs beyond the generator itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Add the six unit-shift variants of every nodule.
    pub augment: bool,
    pub folds: usize,
    /// Fold held out for validation and evaluation.
    pub val_fold: usize,
    /// Share of training records (per class) that keep their labels.
    pub labeled_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            augment: true,
            folds: 10,
            val_fold: 0,
            labeled_fraction: 1.0,
        }
    }
}

/// Everything one run needs. Every key is optional; unknown keys are
/// rejected. The top-level `seed` replaces the seeds of all sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub strategy: Strategy,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub network: NetworkConfig,
    pub loss: MultiTaskLossConfig,
    pub adam: AdamConfig,
    pub train: TrainConfig,
    pub semisup: SemiSupConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            strategy: Strategy::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            network: NetworkConfig::default(),
            loss: MultiTaskLossConfig::default(),
            adam: AdamConfig::default(),
            train: TrainConfig::default(),
            semisup: SemiSupConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err!("{}", e.message()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copies the top-level seed into every section and checks all
    /// invariants.
    pub fn effective(mut self) -> Result<Self> {
        self.synth.seed = self.seed;
        self.network.seed = self.seed;
        self.train.seed = self.seed;
        self.semisup.seed = self.seed;
        self.synth.validate()?;
        self.network.validate()?;
        self.loss.validate()?;
        self.strategy.loss(&self.loss).validate()?;
        self.adam.validate()?;
        self.train.validate()?;
        self.semisup.validate()?;
        if self.synth.patch_shape != self.network.input_shape {
            return Err(config_err!(
                "synth.patch_shape {:?} differs from network.input_shape {:?}",
                self.synth.patch_shape,
                self.network.input_shape
            ));
        }
        if self.data.folds == 0 || self.data.val_fold >= self.data.folds {
            return Err(config_err!(
                "val_fold {} must be below folds {}",
                self.data.val_fold,
                self.data.folds
            ));
        }
        if !(self.data.labeled_fraction > 0.0 && self.data.labeled_fraction <= 1.0) {
            return Err(config_err!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.data.labeled_fraction
            ));
        }
        Ok(self)
    }

    /// Writes the effective config as `config.toml` in `dir`.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}
