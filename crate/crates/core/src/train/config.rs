use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::optim::{OptimizerConfig, ScheduleConfig};
use crate::data::{self, ChangeSample, DatasetSplit, SynthConfig};
use crate::error::{config_err, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub max_iters: u64,
    pub batch_size: usize,
    /// Validate every this many iterations; 0 disables validation.
    pub val_every: u64,
    pub seed: u64,
    /// Random flips/transposes of training pairs.
    pub augment: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_iters: 3000,
            batch_size: 8,
            val_every: 100,
            seed: 0,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory in the `A/`, `B/`, `label/` layout. When unset the
    /// synthetic generator below is used in memory.
    pub root: Option<PathBuf>,
    pub synth: SynthConfig,
    /// train/val/test shares.
    pub ratios: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            synth: SynthConfig::default(),
            ratios: [0.7, 0.1, 0.2],
            split_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Vec<ChangeSample>> {
        match &self.root {
            Some(root) => data::load_dataset(root),
            None => self.synth.generate(),
        }
    }

    pub fn prepare(&self) -> Result<Dataset> {
        let samples = self.load()?;
        let split = data::split(&samples, self.ratios, self.split_seed)?;
        Ok(Dataset::new(samples, split))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Where the best checkpoint and the metrics log are written. Nothing is
    /// written when unset.
    pub out_dir: Option<PathBuf>,
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    #[serde(rename = "loop")]
    pub loop_: LoopConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Single-CPU scale: lr0 1e-3 decaying to 0 at 3000 iterations, batch 8,
    /// validation every 100 iterations.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            loop_: LoopConfig::default(),
            data: DataConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    /// The original full-size schedule: VGG-16 widths, lr0 1e-4, weight
    /// decay 1e-5, batch 32, 30000 iterations, validation every 500.
    pub fn full_scale() -> Self {
        let mut c = Self::desk();
        c.model = ModelConfig::full_scale();
        c.optimizer.lr0 = 1e-4;
        c.optimizer.weight_decay = 1e-5;
        c.schedule.decay_end_iter = 30000;
        c.loop_.max_iters = 30000;
        c.loop_.batch_size = 32;
        c.loop_.val_every = 500;
        c.data.synth.size = 256;
        c
    }

    /// Tiny network on 800 synthetic 64×64 tiles split 600/100/100,
    /// batch 4 for 800 iterations.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.model = ModelConfig::tiny();
        c.data.synth.count = 800;
        c.data.ratios = [0.75, 0.125, 0.125];
        c.loop_.batch_size = 4;
        c.loop_.max_iters = 800;
        c.schedule.decay_end_iter = 800;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "full" => Ok(Self::full_scale()),
            other => Err(config_err!("unknown preset `{other}` (desk|tiny|full)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.loop_.batch_size == 0 {
            return Err(config_err!("loop.batch_size must be positive"));
        }
        Ok(())
    }
}

/// Loaded samples with their split and id lookup.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<ChangeSample>,
    pub split: DatasetSplit,
    index: std::collections::HashMap<String, usize>,
}

impl Dataset {
    pub fn new(samples: Vec<ChangeSample>, split: DatasetSplit) -> Self {
        let index = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        Self { samples, split, index }
    }

    pub fn get(&self, id: &str) -> Result<&ChangeSample> {
        self.index
            .get(id)
            .map(|&i| &self.samples[i])
            .ok_or_else(|| crate::error::Error::Data(format!("unknown sample id `{id}`")))
    }

    pub fn part(&self, part: data::Part) -> Result<Vec<&ChangeSample>> {
        self.split.part(part).iter().map(|id| self.get(id)).collect()
    }
}
