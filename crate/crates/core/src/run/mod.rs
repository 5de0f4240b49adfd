//! Staged, config-driven pipeline runs.
//!
//! Every stage reads the artifacts of its upstream stages under one output
//! directory and writes its own files plus a `manifest.json` recording the
//! configuration hash, input hashes and seed.

mod lock;
mod manifest;
mod stages;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use lock::WorkLock;
pub use manifest::{sha256_file, Manifest, MANIFEST_FILE};
pub use stages::{read_epoch_records, Outcome, Runner, Stage};

use crate::error::{Error, Result};
use crate::geocell::{DEFAULT_PRECISION, MAX_PRECISION};
use crate::masking::{MaskingConfig, MIN_CHUNK_SIZE};
use crate::model::{ModelConfig, PretrainConfig};
use crate::pipeline::{FilterRule, SynthConfig, DEFAULT_WINDOW_S};
use crate::tasks::{FineTuneConfig, Task, DEFAULT_TASK_EXAMPLES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Geohash length; 6 is the closest match to an H3 resolution 8 cell.
    pub precision: usize,
    pub window_s: i64,
    pub filter: FilterRule,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            precision: DEFAULT_PRECISION,
            window_s: DEFAULT_WINDOW_S,
            filter: FilterRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { vocab_size: 30_000 }
    }
}

/// Encoder architecture without the vocabulary size, which comes from the
/// trained tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub layernorm_eps: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let desk = ModelConfig::desk(1);
        Self {
            d_model: desk.d_model,
            n_layers: desk.n_layers,
            n_heads: desk.n_heads,
            d_ff: desk.d_ff,
            max_len: 512,
            dropout: desk.dropout,
            layernorm_eps: desk.layernorm_eps,
        }
    }
}

impl ModelSpec {
    pub fn to_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            n_segments: 2,
            dropout: self.dropout,
            layernorm_eps: self.layernorm_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub tasks: Vec<Task>,
    pub n_examples: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            tasks: Task::ALL.to_vec(),
            n_examples: DEFAULT_TASK_EXAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Check-in file (JSON Lines, or CSV by extension). When absent the
    /// output of the `synth` stage is ingested.
    pub input: Option<PathBuf>,
    pub synth: SynthConfig,
    pub corpus: CorpusConfig,
    pub tokenizer: TokenizerConfig,
    pub masking: MaskingConfig,
    pub model: ModelSpec,
    pub pretrain: PretrainConfig,
    pub finetune: FineTuneConfig,
    pub tasks: TaskConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            input: None,
            synth: SynthConfig::default(),
            corpus: CorpusConfig::default(),
            tokenizer: TokenizerConfig::default(),
            masking: MaskingConfig::default(),
            model: ModelSpec::default(),
            pretrain: PretrainConfig {
                epochs: 40,
                ..PretrainConfig::default()
            },
            finetune: FineTuneConfig::default(),
            tasks: TaskConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON config. A relative `input` path is taken relative to
    /// the config file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(input) = &cfg.input {
            if input.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                cfg.input = Some(base.join(input));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(input) = &self.input {
            if !input.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", input.display())));
            }
        }
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))?;
        let c = &self.corpus;
        if !(1..=MAX_PRECISION).contains(&c.precision) {
            return Err(Error::Config(format!("precision {} outside 1..={MAX_PRECISION}", c.precision)));
        }
        if c.window_s <= 0 {
            return Err(Error::Config("clustering window must be positive".into()));
        }
        if self.tokenizer.vocab_size < 6 {
            return Err(Error::Config("vocab_size must leave room beyond the special tokens".into()));
        }
        let m = &self.masking;
        if m.chunk_size < MIN_CHUNK_SIZE || !(0.0..=1.0).contains(&m.ratio) {
            return Err(Error::Config(format!(
                "chunk_size must be at least {MIN_CHUNK_SIZE} and ratio in [0, 1]"
            )));
        }
        self.model.to_config(self.tokenizer.vocab_size).validate()?;
        if self.model.max_len < m.chunk_size {
            return Err(Error::Config(format!(
                "model max_len {} is shorter than chunk_size {}",
                self.model.max_len, m.chunk_size
            )));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.tasks.n_examples < 2 {
            return Err(Error::Config("tasks.n_examples must be at least 2".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.masking.chunk_size, 512);
        assert_eq!(cfg.corpus.window_s, 600);
        assert_eq!(cfg.finetune.epochs, 10);
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_config_errors() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        let mut cfg = RunConfig::default();
        cfg.model.max_len = 128;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.input = Some("/definitely/not/here.csv".into());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn relative_input_resolves_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"input": "data/x.csv", "seed": 3}"#).unwrap();
        let cfg = RunConfig::from_path(&path).unwrap();
        assert_eq!(cfg.input.unwrap(), dir.path().join("data/x.csv"));
        assert_eq!(cfg.seed, 3);
    }
}
