//! TOML run configuration shared by all commands.
//!
//! ```toml
//! [dataset]
//! dir = "data"
//! per_model = 2
//! train = 8
//! test = 8
//! points = 256
//!
//! [model.generator]
//! blocks = [[64], [128], [256], [128], [64]]
//!
//! [training]
//! epochs = 50
//! out_dir = "run"
//!
//! [evaluation]
//! tau_cm = 1.0
//!
//! [corruption]
//! ghost = 0.02
//! ```
//!
//! Every key is optional and unknown keys are rejected. Each command writes
//! the fully resolved config next to its outputs as [`RESOLVED_FILE`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{LossWeights, DEFAULT_TAU_CM};
use crate::model::{DiscriminatorConfig, GeneratorConfig};
use crate::synth::{CorruptionSpec, DatasetConfig, ViewConfig};
use crate::trainer::TrainConfig;

pub const RESOLVED_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub dir: PathBuf,
    pub models: usize,
    pub per_model: usize,
    pub train: usize,
    pub test: usize,
    pub points: usize,
    pub render_points: usize,
    pub seed: u64,
    pub views: ViewConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            dir: PathBuf::from("data"),
            models: d.models,
            per_model: d.per_model,
            train: d.train,
            test: d.test,
            points: d.points,
            render_points: d.render_points,
            seed: d.seed,
            views: d.views,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_start_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub weights: LossWeights,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            out_dir: PathBuf::from("run"),
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            decay_start_epoch: t.decay_start_epoch,
            beta1: t.beta1,
            beta2: t.beta2,
            clip_norm: t.clip_norm,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            eval_every: t.eval_every,
            weights: t.weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub tau_cm: f64,
    /// Checkpoint for `eval` and `infer`; empty means `<training.out_dir>/model.dpck`.
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            tau_cm: DEFAULT_TAU_CM,
            checkpoint: PathBuf::new(),
            out_dir: PathBuf::from("eval"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
    pub corruption: CorruptionSpec,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_config().validate()?;
        self.train_config().validate()
    }

    /// Sets the dataset and training seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.training.seed = seed;
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        DatasetConfig {
            models: d.models,
            per_model: d.per_model,
            train: d.train,
            test: d.test,
            points: d.points,
            render_points: d.render_points,
            seed: d.seed,
            views: d.views,
            corruption: self.corruption,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            decay_start_epoch: t.decay_start_epoch,
            beta1: t.beta1,
            beta2: t.beta2,
            clip_norm: t.clip_norm,
            weights: t.weights,
            generator: self.model.generator.clone(),
            discriminator: self.model.discriminator.clone(),
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            eval_every: t.eval_every,
            tau_cm: self.evaluation.tau_cm,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.evaluation.checkpoint.as_os_str().is_empty() {
            self.training.out_dir.join(crate::trainer::CHECKPOINT_FILE)
        } else {
            self.evaluation.checkpoint.clone()
        }
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
