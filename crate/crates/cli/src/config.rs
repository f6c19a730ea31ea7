//! TOML run configuration for `embedalign train`.
//!
//! ```toml
//! [paths]
//! train_l1 = "data/train/l1.txt"
//! train_l2 = "data/train/l2.txt"
//! valid_l1 = "data/valid/l1.txt"
//! valid_l2 = "data/valid/l2.txt"
//! valid_gold = "data/valid/gold.txt"   # optional
//! checkpoint = "run/model.json"
//! metrics = "run/metrics.tsv"
//!
//! [data]
//! max_len = 50
//!
//! [model]
//! encoder = "bow"        # or "birnn"
//! latent_dim = 100
//! embed_dim = 128
//! hierarchical = false
//! sentence_dim = 16
//!
//! [training]
//! epochs = 30
//! batch_size = 100
//! lr = 0.001
//! n_neg = 1000
//! seed = 1
//! css = true
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use embedalign::corpus::LoadOptions;
use embedalign::model::{EncoderKind, ModelConfig};
use embedalign::training::TrainConfig;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub paths: Paths,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train_l1: PathBuf,
    pub train_l2: PathBuf,
    pub valid_l1: PathBuf,
    pub valid_l2: PathBuf,
    pub valid_gold: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub max_len: usize,
    pub max_vocab: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = LoadOptions::default();
        Self { max_len: d.max_len, max_vocab: d.max_vocab }
    }
}

impl DataSection {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { max_len: self.max_len, max_vocab: self.max_vocab }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderKind,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub hierarchical: bool,
    pub sentence_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::new(1, 1);
        Self {
            encoder: d.encoder,
            latent_dim: d.latent_dim,
            embed_dim: d.embed_dim,
            hierarchical: d.hierarchical,
            sentence_dim: d.sentence_dim,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, l1_vocab_size: usize, l2_vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            latent_dim: self.latent_dim,
            embed_dim: self.embed_dim,
            hierarchical: self.hierarchical,
            sentence_dim: self.sentence_dim,
            l1_vocab_size,
            l2_vocab_size,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {}", e.message()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for field in [&mut p.train_l1, &mut p.train_l2, &mut p.valid_l1, &mut p.valid_l2, &mut p.checkpoint, &mut p.metrics] {
            resolve(base, field);
        }
        if let Some(g) = p.valid_gold.as_mut() {
            resolve(base, g);
        }
        Ok(cfg)
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}
