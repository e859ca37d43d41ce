//! Pipeline configuration shared by every command.

use std::path::Path;

use anyhow::{bail, Context, Result};
use quids_core::corpus::SyntheticSpec;
use quids_core::decoding::{DecodeMode, GenerationParams};
use quids_core::embedding::{CommandEmbedder, ExternalProviderConfig};
use quids_core::idna::AugmentConfig;
use quids_core::training::TrainConfig;
use quids_core::{Dataset, EmbeddingProvider, ModelConfig, TermFrequencyEmbedder};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SyntheticSpec,
    pub split: SplitConfig,
    pub augment: AugmentConfig,
    pub embedding: EmbeddingConfig,
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 150,
            val: 20,
            test: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { max_size: 10_000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "provider")]
pub enum EmbeddingConfig {
    /// Bag of words over the vocabulary of the dataset being processed.
    #[default]
    TermFrequency,
    Command(ExternalProviderConfig),
}

impl EmbeddingConfig {
    pub fn build(&self, datasets: &[&Dataset]) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match self {
            EmbeddingConfig::TermFrequency => Box::new(TermFrequencyEmbedder::from_datasets(datasets)),
            EmbeddingConfig::Command(c) => Box::new(CommandEmbedder::new(c.clone())?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub beam_size: usize,
    pub max_length: usize,
    pub no_repeat_ngram: usize,
    pub length_penalty: f64,
    pub mode: DecodeMode,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let p = GenerationParams::default();
        Self {
            beam_size: p.beam_size,
            max_length: p.max_length,
            no_repeat_ngram: p.no_repeat_ngram,
            length_penalty: p.length_penalty,
            mode: DecodeMode::Auto,
        }
    }
}

impl GenerateConfig {
    pub fn params(&self) -> GenerationParams {
        GenerationParams {
            beam_size: self.beam_size,
            max_length: self.max_length,
            no_repeat_ngram: self.no_repeat_ngram,
            length_penalty: self.length_penalty,
        }
    }
}

impl Config {
    /// Reads a TOML config, or the config snapshot of a `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let Some(config) = value.get("config") else {
                bail!("{} has no `config` entry", path.display());
            };
            return serde_json::from_value(config.clone()).with_context(|| format!("config in {}", path.display()));
        }
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        let c = Config::load(&path).unwrap();
        assert_eq!(c.split.train, 200);
        assert_eq!(c.train.learning_rate, 3e-3);
        assert_eq!(c.embedding, EmbeddingConfig::TermFrequency);
        c.train.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_command_provider() {
        assert!(toml::from_str::<Config>("[train]\nepoch = 3\n").is_err());
        let c: Config = toml::from_str(
            "[embedding]\nprovider = \"command\"\nname = \"e\"\ncommand = [\"cat\"]\ndim = 4\n",
        )
        .unwrap();
        assert!(matches!(c.embedding, EmbeddingConfig::Command(ref e) if e.dim == 4));
    }
}
