//! Run configuration file (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use clinical_mtl::codec::GrammarConfig;
use clinical_mtl::model::{EncoderConfig, ModelConfig, NerConfig, ReConfig};
use clinical_mtl::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Documents written by `generate`.
    pub documents: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let g = GrammarConfig::default();
        CorpusConfig {
            documents: 100,
            min_sentences: g.min_sentences,
            max_sentences: g.max_sentences,
        }
    }
}

impl CorpusConfig {
    pub fn grammar(&self) -> GrammarConfig {
        GrammarConfig {
            min_sentences: self.min_sentences,
            max_sentences: self.max_sentences,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub lowercase: bool,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_freq: 2,
            lowercase: true,
        }
    }
}

/// Everything a run needs. The top-level `seed` drives corpus generation,
/// the train/validation split, initialization and training; it overrides
/// `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub vocab: VocabConfig,
    pub encoder: EncoderConfig,
    pub ner: NerConfig,
    pub re: ReConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_parts(ModelConfig::default(), TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_parts(model: ModelConfig, train: TrainConfig) -> Self {
        RunConfig {
            seed: train.seed,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            vocab: VocabConfig::default(),
            encoder: model.encoder,
            ner: model.ner,
            re: model.re,
            train,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.encoder.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            ner: self.ner.clone(),
            re: self.re.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }
}
