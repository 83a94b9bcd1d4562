use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{OptimizerConfig, ScheduleConfig};
use super::synth::Domain;
use crate::adapters::{AdapterConfig, Mode};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;

/// Synthetic corpus used by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Scenes in the training stream; step `s` reads scenes `s * batch ..` modulo this.
    pub train_images: usize,
    pub eval_images: usize,
    pub max_regions: usize,
    pub domain: Domain,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_images: 1 << 20,
            eval_images: 64,
            max_regions: 3,
            domain: Domain::Standard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Token clustering at `encoder.cluster_after`; must be off in adapt mode.
    pub cluster: bool,
    pub out_dir: Option<PathBuf>,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Adapt mode only: attach adapters, or train the heads alone.
    pub use_adapters: bool,
    pub adapter: AdapterConfig,
    /// Adapt mode only: the pretrained checkpoint to start from.
    pub base_checkpoint: Option<PathBuf>,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            steps: 2000,
            batch: 32,
            seed: 0,
            mode: Mode::Pretrain,
            cluster: true,
            out_dir: None,
            checkpoint_every: 500,
            use_adapters: true,
            adapter: AdapterConfig::default(),
            base_checkpoint: None,
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults for adapting a pretrained model to the shifted domain.
    pub fn adapt_default() -> Self {
        RunConfig {
            optimizer: OptimizerConfig::adamw(),
            schedule: ScheduleConfig {
                warmup_steps: 20,
                ..Default::default()
            },
            steps: 300,
            mode: Mode::Adapt,
            cluster: false,
            data: DataConfig {
                domain: Domain::Shifted,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The encoder as instantiated, with clustering switched by `cluster`.
    pub fn model_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            cluster_after: if self.cluster { self.encoder.cluster_after } else { None },
            ..self.encoder.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if self.cluster && self.encoder.cluster_after.is_none() {
            return Err(Error::Config("cluster is on but encoder.cluster_after is null".into()));
        }
        if self.data.train_images == 0 || self.data.eval_images == 0 || !(1..=3).contains(&self.data.max_regions) {
            return Err(Error::Config("data needs train/eval images and max_regions in 1..=3".into()));
        }
        if self.mode == Mode::Adapt && self.cluster {
            return Err(Error::Config("adapt mode runs on the full token grid; set cluster to false".into()));
        }
        Ok(())
    }
}
