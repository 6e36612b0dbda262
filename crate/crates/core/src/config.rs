//! Run configuration: a TOML file layered over built-in defaults.
//!
//! ```toml
//! [paths]
//! train_source = "data/train.en"
//! train_target = "data/train.si"
//! checkpoint_dir = "runs/a"
//!
//! [model]
//! num_layers = 5
//!
//! [pos_aug]
//! mode = "embed_concat"
//! d_pos = 128
//! ```
//!
//! Sections: `paths`, `model`, `pos_aug`, `bpe`, `train`, `optimizer`,
//! `decode`, `filter`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::FilterRuleSet;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pos_aug::{AugMode, PosAugConfig};
use crate::train::{OptimizerConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub train_source: Option<PathBuf>,
    pub train_target: Option<PathBuf>,
    /// Tagged source side in slash format; the fallback tagger is used when
    /// absent.
    pub train_tags: Option<PathBuf>,
    pub valid_source: Option<PathBuf>,
    pub valid_target: Option<PathBuf>,
    pub valid_tags: Option<PathBuf>,
    pub bpe_model: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Defaults to `metrics.tsv` inside the checkpoint directory.
    pub metrics_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpeConfig {
    pub merges: usize,
}

impl Default for BpeConfig {
    fn default() -> Self {
        Self { merges: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub pos_aug: PosAugConfig,
    pub bpe: BpeConfig,
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
    pub decode: DecodeConfig,
    pub filter: FilterRuleSet,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            model: ModelConfig::default(),
            pos_aug: PosAugConfig::new(AugMode::EmbedConcat, 128),
            bpe: BpeConfig::default(),
            train: TrainConfig::default(),
            optimizer: OptimizerConfig::default(),
            decode: DecodeConfig::default(),
            filter: FilterRuleSet::default(),
        }
    }
}

impl RunConfig {
    /// Tiny sizes for tests and CPU experiments.
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        Self {
            pos_aug: PosAugConfig::with_default_width(AugMode::EmbedConcat, model.d_model),
            model,
            bpe: BpeConfig { merges: 200 },
            train: TrainConfig {
                warmup_steps: 100,
                max_steps: 500,
                checkpoint_every: 100,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    /// `base` with the keys present in `text` replaced.
    pub fn layered(base: &Self, text: &str, origin: &Path) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::Config(format!("{}: {}", origin.display(), e.message()))
        })?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut merged, overlay);
        merged.try_into().map_err(|e: toml::de::Error| {
            Error::Config(format!("{}: {}", origin.display(), e.message()))
        })
    }

    pub fn load(path: &Path, desk: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::layered(&Self::base(desk), &text, path)
    }

    pub fn base(desk: bool) -> Self {
        if desk {
            Self::desk()
        } else {
            Self::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
