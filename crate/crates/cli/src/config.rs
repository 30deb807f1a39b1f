//! Run configuration: model preset, config file, then flag overrides.

use std::path::{Path, PathBuf};

use camscope_core::model::ModelConfig;
use camscope_core::preprocess::WindowSetting;
use camscope_core::store::{read_json, write_json};
use camscope_core::train::TrainConfig;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelPreset {
    /// 96×96×48 input with narrow layers.
    Desk,
    /// 192×192×64 input, 32/96/256 channels.
    Paper,
}

/// Everything needed to reproduce a training run. Frozen into the run
/// directory as `run_config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub window: WindowSetting,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct RunOverrides {
    /// Model preset used when no config file is given.
    #[arg(long, value_enum)]
    pub preset: Option<ModelPreset>,
    /// 0 trains the plain 2.5D CNN.
    #[arg(long)]
    pub attention_blocks: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seeds weight init and batch order; falls back to CAMSCOPE_SEED.
    #[arg(long, env = "CAMSCOPE_SEED")]
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Model preset with the reference training recipe.
    pub fn preset(preset: ModelPreset) -> Self {
        let model = match preset {
            ModelPreset::Desk => ModelConfig::desk(),
            ModelPreset::Paper => ModelConfig::paper(),
        };
        Self {
            seed: 0,
            model,
            train: TrainConfig::paper(),
            window: WindowSetting::default(),
            data_dir: None,
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        Ok(read_json(path)?)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        Ok(write_json(self, path)?)
    }

    pub fn apply(&mut self, o: &RunOverrides) {
        if let Some(b) = o.attention_blocks {
            self.model.attention_blocks = b;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(lr) = o.lr {
            self.train.lr0 = lr;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        self.model.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.window.validate()?;
        Ok(())
    }
}
