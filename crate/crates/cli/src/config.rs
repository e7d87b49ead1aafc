//! Run configuration: a JSON file overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use threem::encoders::WordStateSource;
use threem::inference::{PenaltyConfig, DEFAULT_BANNED_ENDINGS};
use threem::trainer::TrainConfig;
use threem::{Ablation, Error, ModelConfig, ModelDims, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub dims: ModelDims,
    pub dropout: f64,
    pub word_state_source: WordStateSource,
    pub init_scale: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let base = ModelConfig::new(1, 1, 1);
        ModelSettings {
            dims: base.dims,
            dropout: base.dropout,
            word_state_source: base.word_state_source,
            init_scale: base.init_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    pub beam: usize,
    pub max_len: usize,
    pub min_len: usize,
    pub repeat_penalty: f64,
    pub banned_endings: Vec<String>,
    /// Caption every image in this style.
    pub style: Option<String>,
    /// Caption every image in every style.
    pub all_styles: bool,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            beam: 5,
            max_len: 20,
            min_len: 3,
            repeat_penalty: 2.0,
            banned_endings: DEFAULT_BANNED_ENDINGS.iter().map(|s| s.to_string()).collect(),
            style: None,
            all_styles: false,
        }
    }
}

/// Everything a command needs, with defaults materialized. Written next to
/// every command's outputs and accepted back through `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub min_frequency: usize,
    pub ablation: Ablation,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub decode: DecodeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            data: None,
            val: None,
            features: None,
            checkpoint: None,
            out: None,
            min_frequency: 1,
            ablation: Ablation::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            decode: DecodeSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn defaults(command: &str) -> Self {
        RunConfig {
            command: command.to_owned(),
            ..Default::default()
        }
    }

    pub fn load(path: &Path, command: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Parameter(format!("config {}: {e}", path.display())))?;
        cfg.command = command.to_owned();
        Ok(cfg)
    }

    pub fn model_config(&self, vocab_size: usize, num_styles: usize, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            dims: self.model.dims,
            dropout: self.model.dropout,
            word_state_source: self.model.word_state_source,
            ablation: self.ablation,
            init_scale: self.model.init_scale,
            ..ModelConfig::new(vocab_size, num_styles, feature_dim)
        }
    }

    pub fn penalties(&self, vocab: &threem::corpus::Vocabulary) -> PenaltyConfig {
        PenaltyConfig {
            repeat_penalty: self.decode.repeat_penalty,
            max_length: self.decode.max_len,
            min_length: self.decode.min_len,
            ..PenaltyConfig::with_banned_endings(vocab, &self.decode.banned_endings)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model_config(1, 1, 1).validate()?;
        if self.min_frequency == 0 {
            return Err(Error::Parameter("min_frequency must be positive".into()));
        }
        if self.decode.beam == 0 {
            return Err(Error::Parameter("beam must be at least 1".into()));
        }
        if self.decode.all_styles && self.decode.style.is_some() {
            return Err(Error::Parameter("style and all_styles are mutually exclusive".into()));
        }
        Ok(())
    }

    /// Writes `config.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))
}
