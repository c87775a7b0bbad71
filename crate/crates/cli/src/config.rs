//! Run configuration: a TOML file layered over a preset, then flags.

use std::path::{Path, PathBuf};

use lexki::ki::KiConfig;
use lexki::model::{DecodeParams, ModelConfig, TrainConfig};
use lexki::retriever::{MiningStrategies, RetrieverConfig, RetrieverTrainConfig};
use lexki::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    /// Published dimensions. Documented, not expected to finish on a laptop.
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Preset> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

/// Default locations; every subcommand flag can override its own path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub articles: PathBuf,
    pub kb: PathBuf,
    pub vocab: PathBuf,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub retriever: PathBuf,
    pub alignments: PathBuf,
    pub checkpoint: PathBuf,
    pub hypotheses: PathBuf,
    pub report: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stopwords: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            articles: "articles.jsonl".into(),
            kb: "kb.jsonl".into(),
            vocab: "vocab.txt".into(),
            train: "train.jsonl".into(),
            valid: "valid.jsonl".into(),
            test: "test.jsonl".into(),
            retriever: "retriever.ckpt".into(),
            alignments: "alignments.jsonl".into(),
            checkpoint: "model.ckpt".into(),
            hypotheses: "hypotheses.jsonl".into(),
            report: "report.json".into(),
            stopwords: None,
        }
    }
}

/// [`ModelConfig`] without the vocabulary size, which comes from the
/// vocabulary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout: f32,
}

impl ModelSection {
    fn from(c: ModelConfig) -> Self {
        ModelSection {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ffn: c.d_ffn,
            max_len: c.max_len,
            dropout: c.dropout,
        }
    }

    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub d_proj: usize,
    pub shared_projection: bool,
    pub margin: f32,
    pub dropout: f32,
    pub train: RetrieverTrainConfig,
}

impl RetrieverSection {
    fn from(c: RetrieverConfig, train: RetrieverTrainConfig) -> Self {
        RetrieverSection {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ffn: c.d_ffn,
            max_len: c.max_len,
            d_proj: c.d_proj,
            shared_projection: c.shared_projection,
            margin: c.margin,
            dropout: c.dropout,
            train,
        }
    }

    pub fn with_vocab(&self, vocab_size: usize) -> RetrieverConfig {
        RetrieverConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            max_len: self.max_len,
            d_proj: self.d_proj,
            shared_projection: self.shared_projection,
            margin: self.margin,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatSection {
    /// Previous turns (both speakers) fed back as context.
    pub context_turns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub threads: usize,
    pub vocab_max_size: usize,
    pub paths: Paths,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub ki: KiConfig,
    pub retriever: RetrieverSection,
    pub mining: MiningStrategies,
    pub decode: DecodeParams,
    pub chat: ChatSection,
}

impl RunConfig {
    pub fn preset(p: Preset) -> RunConfig {
        let (model, train, ki, decode) = match p {
            Preset::Desk => (ModelConfig::desk(0), TrainConfig::default(), KiConfig::default(), DecodeParams::default()),
            Preset::Paper => (
                ModelConfig::paper(0),
                TrainConfig::paper(),
                KiConfig::paper(),
                DecodeParams {
                    max_len: 64,
                    ..DecodeParams::default()
                },
            ),
        };
        let retriever = match p {
            Preset::Desk => RetrieverConfig::desk(0),
            Preset::Paper => RetrieverConfig {
                d_model: 512,
                n_layers: 6,
                n_heads: 4,
                d_ffn: 1024,
                max_len: 256,
                d_proj: 256,
                ..RetrieverConfig::desk(0)
            },
        };
        RunConfig {
            preset: p,
            seed: 0,
            threads: 1,
            vocab_max_size: match p {
                Preset::Desk => 10_000,
                Preset::Paper => 50_000,
            },
            paths: Paths::default(),
            model: ModelSection::from(model),
            train,
            ki,
            retriever: RetrieverSection::from(retriever, RetrieverTrainConfig::default()),
            mining: MiningStrategies::default(),
            decode,
            chat: ChatSection { context_turns: 2 },
        }
    }

    /// Parse a config file. Keys it leaves out keep the values of its
    /// `preset` (or of `fallback` when it names none); unknown keys fail.
    pub fn from_toml(text: &str, fallback: Preset) -> Result<RunConfig> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let preset = match file.get("preset") {
            Some(toml::Value::String(s)) => Preset::parse(s)?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => fallback,
        };
        let base = toml::Table::try_from(RunConfig::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, file);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, fallback: Preset) -> Result<RunConfig> {
        Self::from_toml(&std::fs::read_to_string(path)?, fallback)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex sha256 of the resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        self.model.with_vocab(5).validate()?;
        self.retriever.with_vocab(5).validate()?;
        self.ki.validate()?;
        self.decode.validate()
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_desk_preset() {
        let c = RunConfig::from_toml("", Preset::Desk).unwrap();
        assert_eq!(c, RunConfig::preset(Preset::Desk));
        assert_eq!(c.model.with_vocab(200), ModelConfig::desk(200));
        assert_eq!(c.retriever.with_vocab(200), RetrieverConfig::desk(200));
        assert_eq!(c.ki, KiConfig::default());
    }

    #[test]
    fn nested_keys_override_one_field() {
        let c = RunConfig::from_toml("seed = 9\n[model]\nd_model = 32\n[train.schedule]\npeak = 0.001\n", Preset::Desk)
            .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.model.n_layers, 2);
        assert_eq!(c.train.schedule.peak, 0.001);
        assert_eq!(c.train.schedule.warmup_steps, 100);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["sede = 1", "[model]\nwidth = 3", "[ki]\nmargn = 0.1", "[paths]\nmodel = \"x\""] {
            let e = RunConfig::from_toml(bad, Preset::Desk).unwrap_err();
            assert_eq!(e.name(), "ConfigError", "{bad}");
        }
    }

    #[test]
    fn large_preset_named_in_the_file() {
        let c = RunConfig::from_toml("preset = \"paper\"", Preset::Desk).unwrap();
        assert_eq!(c.model.d_model, 512);
        assert_eq!(c.train.token_budget, 4096);
        assert!(RunConfig::from_toml("preset = \"huge\"", Preset::Desk).is_err());
    }

    #[test]
    fn round_trip_and_hash() {
        let c = RunConfig::preset(Preset::Paper);
        let back = RunConfig::from_toml(&c.to_toml(), Preset::Desk).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), RunConfig::preset(Preset::Desk).hash());
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::from_toml("[model]\nn_heads = 3", Preset::Desk).is_err());
        assert!(RunConfig::from_toml("threads = 0", Preset::Desk).is_err());
        assert!(RunConfig::from_toml("[decode]\nbeam_size = 0", Preset::Desk).is_err());
    }
}
