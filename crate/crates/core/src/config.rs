//! Run configuration: one TOML file, one section per component.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Overrides use dotted paths (`train.epochs=3`) and must name a key that
//! already exists in the fully populated configuration.

use crate::error::{Error, Result};
use crate::miner::RankerConfig;
use crate::oracle::MockOracle;
use crate::params::AdamWConfig;
use crate::prompt_pool::PoolConfig;
use crate::qa_model::ModelConfig;
use crate::synthetic::SyntheticConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ENDPOINT_ENV: &str = "OLTQA_ORACLE_ENDPOINT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub curation: CurationConfig,
    pub encoder: EncoderConfig,
    pub pool: PoolConfig,
    pub oracle: OracleConfig,
    pub miner: RankerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Dataset location. Empty paths select the built-in synthetic suite.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_path: String,
    pub test_path: String,
    /// Explicit unseen tasks; when empty, `unseen_count` tasks are drawn.
    pub unseen_tasks: Vec<String>,
    pub unseen_count: usize,
}

impl DataConfig {
    pub fn is_synthetic(&self) -> bool {
        self.train_path.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub alpha: f64,
    pub head_budget: usize,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            head_budget: 1000,
            seed: 42,
        }
    }
}

/// Frozen query encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub seed: u64,
    /// Share vectors between synonyms of the synthetic lexicon.
    pub use_lexicon: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 0,
            use_lexicon: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleBackend {
    #[default]
    Mock,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub backend: OracleBackend,
    pub endpoint: String,
    pub model: String,
    pub max_hint_tokens: usize,
    pub timeout_secs: u64,
    pub mock: MockOracle,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            backend: OracleBackend::Mock,
            endpoint: String::new(),
            model: String::new(),
            max_hint_tokens: 32,
            timeout_secs: 60,
            mock: MockOracle::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    NoPm,
    NoPk,
    NoMkd,
    StaticMkd,
    BackKd,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::NoPm,
        Ablation::NoPk,
        Ablation::NoMkd,
        Ablation::StaticMkd,
        Ablation::BackKd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoPm => "no-pm",
            Ablation::NoPk => "no-pk",
            Ablation::NoMkd => "no-mkd",
            Ablation::StaticMkd => "static-mkd",
            Ablation::BackKd => "back-kd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation {s:?}")))
    }

    pub fn uses_meta_prompt(self) -> bool {
        self != Ablation::NoPm
    }

    pub fn uses_knowledge_prompt(self) -> bool {
        self != Ablation::NoPk
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// QA model, meta prompts and keys.
    pub learning_rate: f64,
    /// Retriever and reranker.
    pub ranker_learning_rate: f64,
    pub weight_decay: f64,
    /// Candidates scored per instance and step, drawn from the BM25 pool.
    pub candidate_subsample: usize,
    /// Validation instances used for the scoreboard.
    pub validation_subsample: usize,
    pub key_loss_weight: f64,
    pub qa_loss_weight: f64,
    pub mkd_loss_weight: f64,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 5,
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-4,
            ranker_learning_rate: 1e-4,
            weight_decay: 0.01,
            candidate_subsample: 64,
            validation_subsample: 256,
            key_loss_weight: 1.0,
            qa_loss_weight: 1.0,
            mkd_loss_weight: 1.0,
            seed: 42,
            seeds: vec![42, 43, 44],
            ablation: Ablation::None,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self, learning_rate: f64) -> AdamWConfig {
        AdamWConfig {
            learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Head@m averages the `m` largest seen tasks.
    pub head_m: usize,
    /// Tail@n averages the `n` smallest seen tasks.
    pub tail_n: usize,
    /// Alpha values and unseen-task counts crossed by `sweep`.
    pub sweep_alphas: Vec<f64>,
    pub sweep_unseen_counts: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            head_m: 2,
            tail_n: 3,
            sweep_alphas: vec![1.0, 2.0, 3.0],
            sweep_unseen_counts: vec![3],
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `section.key=value` overrides. Values parse as TOML literals and
    /// fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            let mut node = &mut tree;
            let parts: Vec<&str> = path.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override {path:?}: {part:?} is not a section")))?;
                let Some(child) = table.get_mut(*part) else {
                    return Err(Error::Config(format!("override {path:?} names no existing config key")));
                };
                if i + 1 == parts.len() {
                    if child.is_table() {
                        return Err(Error::Config(format!("override {path:?} names a section, not a key")));
                    }
                    *child = value.clone();
                }
                node = child;
            }
        }
        let config: Config = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.pool.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.miner.validate()?;
        self.model.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        if t.candidate_subsample == 0 || t.candidate_subsample > self.miner.candidates {
            return Err(Error::Config(format!(
                "train.candidate_subsample ({}) must be in 1..=miner.candidates ({})",
                t.candidate_subsample, self.miner.candidates
            )));
        }
        if t.validation_subsample == 0 {
            return Err(Error::Config("train.validation_subsample must be >= 1".into()));
        }
        if self.pool.select_count * self.pool.prompt_len > self.model.max_prefix_len {
            return Err(Error::Config(format!(
                "meta prompt length {} exceeds model.max_prefix_len {}",
                self.pool.select_count * self.pool.prompt_len,
                self.model.max_prefix_len
            )));
        }
        if self.oracle.backend == OracleBackend::Remote && self.oracle.model.is_empty() {
            return Err(Error::Config("oracle.model is required for the remote backend".into()));
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Holder {
        v: toml::Value,
    }
    toml::from_str::<Holder>(&format!("v = {raw}"))
        .map(|h| h.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}
