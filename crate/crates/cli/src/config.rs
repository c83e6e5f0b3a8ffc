use std::path::{Path, PathBuf};

use anyhow::Context;
use gloss2pose::acd::AcdConfig;
use serde::{Deserialize, Serialize};

/// Settings shared by all commands. Values come from the defaults, then an
/// optional JSON override file, then command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Preset name or path to a topology JSON file.
    pub topology: String,
    pub schedule_steps: usize,
    pub inference_steps: usize,
    pub corpus: CorpusSettings,
    pub train: TrainSettings,
    pub model: AcdConfig,
    pub corpus_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub vocab_size: usize,
    pub samples: usize,
    pub frames_per_gloss: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub lambda_bone: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            topology: "toy8".into(),
            schedule_steps: 1000,
            inference_steps: 5,
            corpus: CorpusSettings::default(),
            train: TrainSettings::default(),
            model: AcdConfig::default(),
            corpus_dir: None,
            checkpoint: None,
            output: None,
        }
    }
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            samples: 200,
            frames_per_gloss: 10,
        }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        let core = gloss2pose::training::TrainConfig::default();
        Self {
            lambda_bone: core.lambda_bone,
            learning_rate: core.learning_rate,
            batch_size: core.batch_size,
            epochs: core.epochs,
            clip_norm: core.clip_norm,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn train_config(&self) -> gloss2pose::training::TrainConfig {
        gloss2pose::training::TrainConfig {
            lambda_bone: self.train.lambda_bone,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            schedule_steps: self.schedule_steps,
            seed: self.seed,
            clip_norm: self.train.clip_norm,
        }
    }
}

/// Overwrites `slot` when a flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
