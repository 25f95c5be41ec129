//! The flat JSON run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Generator, Grammar, GrammarError, Sampling, SamplingMode};
use crate::model::{LabelMode, ModelConfig, ModelError, Variant};
use crate::optim::{Schedule, SgdConfig};
use crate::rng;
use crate::train::TrainConfig;
use crate::trg::{AggregatorWeight, SimilarityKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("invalid grammar: {0}")]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Every tunable of a run. Unknown keys are rejected; missing keys take the
/// defaults shown by `--dump-config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory holding `train.trgd` and `val.trgd`.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Thread cap; 0 uses all cores, 1 is bit-deterministic by construction.
    pub workers: usize,

    pub events: Vec<String>,
    pub classes: Vec<String>,
    pub noise: f64,
    pub frames_per_event: usize,
    pub total_frames: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub label_mode: LabelMode,
    pub train_samples: usize,
    pub val_samples: usize,

    pub variant: Variant,
    pub frames: usize,
    pub hidden_channels: usize,
    pub channels: usize,
    pub heads: usize,
    pub layers: usize,
    pub similarity: SimilarityKind,
    pub sim_width: Option<usize>,
    pub scale_similarity: bool,
    pub aggregator: AggregatorWeight,
    pub batch_norm: bool,
    pub similarity_batch_norm: bool,
    pub zero_init_spatial: bool,

    pub sampling: SamplingMode,
    pub stride: usize,
    pub eval_clips: usize,

    pub epochs: usize,
    pub drop_epoch: usize,
    pub initial_lr: f64,
    pub drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub batch_size: usize,
    pub eval_batch_size: usize,

    /// Head counts trained by `sweep-heads`.
    pub sweep_heads: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = Grammar::default();
        let m = ModelConfig::default();
        let s = Schedule::DESK;
        let o = SgdConfig::default();
        Self {
            seed: 7,
            data_dir: "data".into(),
            out_dir: "runs".into(),
            workers: 0,
            events: g.events,
            classes: g.classes,
            noise: g.noise,
            frames_per_event: g.frames_per_event,
            total_frames: g.total_frames,
            in_channels: g.channels,
            height: g.height,
            width: g.width,
            label_mode: g.label_mode,
            train_samples: 1200,
            val_samples: 300,
            variant: m.variant,
            frames: m.frames,
            hidden_channels: m.hidden_channels,
            channels: m.channels,
            heads: m.heads,
            layers: m.layers,
            similarity: m.similarity,
            sim_width: m.sim_width,
            scale_similarity: m.scale_similarity,
            aggregator: m.aggregator,
            batch_norm: m.batch_norm,
            similarity_batch_norm: m.similarity_batch_norm,
            zero_init_spatial: m.zero_init_spatial,
            sampling: SamplingMode::Sparse,
            stride: 4,
            eval_clips: 2,
            epochs: s.epochs,
            drop_epoch: s.drop_epoch,
            initial_lr: s.initial_lr,
            drop_factor: s.drop_factor,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            nesterov: o.nesterov,
            batch_size: 8,
            eval_batch_size: 32,
            sweep_heads: vec![1, 2, 3, 4, 6, 8],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn grammar(&self) -> Grammar {
        Grammar {
            events: self.events.clone(),
            classes: self.classes.clone(),
            noise: self.noise,
            frames_per_event: self.frames_per_event,
            total_frames: self.total_frames,
            channels: self.in_channels,
            height: self.height,
            width: self.width,
            label_mode: self.label_mode,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            frames: self.frames,
            in_channels: self.in_channels,
            height: self.height,
            width: self.width,
            hidden_channels: self.hidden_channels,
            channels: self.channels,
            heads: self.heads,
            layers: self.layers,
            similarity: self.similarity,
            sim_width: self.sim_width,
            scale_similarity: self.scale_similarity,
            aggregator: self.aggregator,
            batch_norm: self.batch_norm,
            similarity_batch_norm: self.similarity_batch_norm,
            zero_init_spatial: self.zero_init_spatial,
            variant: self.variant,
            classes: self.classes.len(),
            label_mode: self.label_mode,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            initial_lr: self.initial_lr,
            drop_factor: self.drop_factor,
            drop_epoch: self.drop_epoch,
            epochs: self.epochs,
        }
    }

    pub fn sampling(&self) -> Sampling {
        Sampling {
            mode: self.sampling,
            frames: self.frames,
            stride: self.stride,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule(),
            sgd: SgdConfig {
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                nesterov: self.nesterov,
            },
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            sampling: self.sampling(),
            eval_clips: self.eval_clips,
            seed: self.seed,
        }
    }

    pub fn prototype_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "prototypes", 0)
    }

    /// Seeds of the train (`0`) and validation (`1`) splits.
    pub fn data_seed(&self, split: u64) -> u64 {
        rng::derive_seed(self.seed, "data", split)
    }

    pub fn generator(&self) -> Result<Generator, ConfigError> {
        Ok(Generator::new(self.grammar(), self.prototype_seed())?)
    }

    /// Checks every module's preconditions; returns the validated generator.
    pub fn validate(&self) -> Result<Generator, ConfigError> {
        let generator = self.generator()?;
        self.model().validate()?;
        self.schedule().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sampling()
            .validate(self.total_frames)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let positive = [
            ("train_samples", self.train_samples),
            ("val_samples", self.val_samples),
            ("batch_size", self.batch_size),
            ("eval_batch_size", self.eval_batch_size),
            ("eval_clips", self.eval_clips),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ConfigError::Invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(ConfigError::Invalid(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.sweep_heads.is_empty() || self.sweep_heads.contains(&0) {
            return Err(ConfigError::Invalid("sweep_heads must list positive head counts".into()));
        }
        Ok(generator)
    }
}
