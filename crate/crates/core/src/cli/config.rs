use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{Batch, CorpusData, Dataset, SynthData, SynthTask, TaskKind, TrainConfig};

/// Environment variable that replaces `train.seed` when set.
pub const SEED_ENV: &str = "SLICENET_SEED";

/// Where training pairs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synth {
        task: TaskKind,
        /// Total vocabulary, reserved ids included.
        vocab: usize,
        #[serde(default = "one")]
        min_len: usize,
        max_len: usize,
        /// Fixes the toy-translate grammar independently of the run seed.
        #[serde(default)]
        grammar_seed: u64,
    },
    Corpus {
        source: PathBuf,
        target: PathBuf,
        #[serde(default = "one")]
        min_count: usize,
        /// Trailing pairs held out for evaluation.
        holdout: usize,
        #[serde(default = "yes")]
        repeat: bool,
    },
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synth {
            task: TaskKind::Copy,
            vocab: 16,
            min_len: 1,
            max_len: 10,
            grammar_seed: 0,
        }
    }
}

impl DataConfig {
    /// Build the dataset. Relative corpus paths resolve against `base`.
    pub fn open(&self, base: &Path, train: &TrainConfig) -> Result<Data> {
        match self {
            DataConfig::Synth {
                task,
                vocab,
                min_len,
                max_len,
                grammar_seed,
            } => {
                let task = SynthTask::new(*task, *vocab, *min_len, *max_len, *grammar_seed)?;
                let data = SynthData::new(task, train.seed, train.eval_batches, train.batch_size)?;
                Ok(Data::Synth(data))
            }
            DataConfig::Corpus {
                source,
                target,
                min_count,
                holdout,
                repeat,
            } => {
                if *holdout == 0 {
                    return Err(Error::Config("data.holdout must be >= 1".into()));
                }
                let data = CorpusData::from_files(
                    &base.join(source),
                    &base.join(target),
                    *min_count,
                    *holdout,
                    *repeat,
                    train.batch_size,
                    train.seed,
                )?;
                Ok(Data::Corpus(data))
            }
        }
    }
}

/// An opened data source.
#[derive(Debug, Clone)]
pub enum Data {
    Synth(SynthData),
    Corpus(CorpusData),
}

impl Dataset for Data {
    fn train_batch(&mut self, size: usize) -> Result<Batch> {
        match self {
            Data::Synth(d) => d.train_batch(size),
            Data::Corpus(d) => d.train_batch(size),
        }
    }

    fn eval_set(&self) -> &[Batch] {
        match self {
            Data::Synth(d) => d.eval_set(),
            Data::Corpus(d) => d.eval_set(),
        }
    }

    fn vocab_sizes(&self) -> (usize, usize) {
        match self {
            Data::Synth(d) => d.vocab_sizes(),
            Data::Corpus(d) => d.vocab_sizes(),
        }
    }
}

/// Everything one experiment needs, as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// Parse and report problems as `path:line:column: message`.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            Error::Config(format!(
                "{}:{}:{}: {e}",
                origin.display(),
                e.line(),
                e.column()
            ))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, path)
    }

    /// Apply the seed override and check every section.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        if let Some(seed) = flag {
            self.train.seed = seed;
        } else if let Ok(raw) = std::env::var(SEED_ENV) {
            self.train.seed = raw.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    /// Fill vocabulary sizes left at 0 from the data, then validate.
    pub fn resolve_vocab(&mut self, (src, tgt): (usize, usize)) -> Result<()> {
        if self.model.vocab_src == 0 {
            self.model.vocab_src = src;
        }
        if self.model.vocab_tgt == 0 {
            self.model.vocab_tgt = tgt;
        }
        if self.model.vocab_src < src || self.model.vocab_tgt < tgt {
            return Err(Error::Config(format!(
                "model vocabularies ({}, {}) are smaller than the data's ({src}, {tgt})",
                self.model.vocab_src, self.model.vocab_tgt
            )));
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
