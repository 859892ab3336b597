use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenBatch, END_ID, MIN_VOCAB, PAD_ID, START_ID};
use crate::tensor::Rng;

/// First payload id; everything below is reserved.
pub const FIRST_PAYLOAD: usize = 3;
/// Out-of-vocabulary id used by corpus vocabularies.
pub const UNK_ID: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// A source batch and its target batch (targets end with `END`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: TokenBatch,
    pub tgt: TokenBatch,
}

impl Batch {
    pub fn from_pairs(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Self> {
        let src: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
        let tgt: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
        Ok(Self {
            src: TokenBatch::from_rows(&src)?,
            tgt: TokenBatch::from_rows(&tgt)?,
        })
    }

    /// 1 at real target tokens, 0 at padding.
    pub fn target_weights(&self) -> Vec<f64> {
        self.tgt
            .ids
            .iter()
            .map(|&t| if t == PAD_ID { 0.0 } else { 1.0 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ToyTranslate,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "toy-translate" => Ok(Self::ToyTranslate),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected copy, reverse or toy-translate)"
            ))),
        }
    }
}

/// Generator for one synthetic task. Payload tokens are `3..vocab`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthTask {
    pub kind: TaskKind,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Toy-translate substitution `table[prev * vocab + cur]`.
    table: Vec<usize>,
}

impl SynthTask {
    /// `seed` fixes the toy-translate grammar; the other tasks ignore it.
    pub fn new(
        kind: TaskKind,
        vocab: usize,
        min_len: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if vocab < MIN_VOCAB {
            return Err(Error::Config(format!(
                "task vocab must be >= {MIN_VOCAB}, got {vocab}"
            )));
        }
        if min_len == 0 || min_len > max_len {
            return Err(Error::Config(format!(
                "need 1 <= min_len <= max_len, got {min_len}..{max_len}"
            )));
        }
        let mut table = Vec::new();
        if kind == TaskKind::ToyTranslate {
            let mut rng = Rng::seed(seed);
            table = (0..vocab * vocab)
                .map(|_| rng.between(FIRST_PAYLOAD, vocab - 1))
                .collect();
        }
        Ok(Self {
            kind,
            vocab,
            min_len,
            max_len,
            table,
        })
    }

    /// Target for a payload source, `END` included.
    pub fn target_for(&self, src: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = match self.kind {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::ToyTranslate => {
                let mut prev = START_ID;
                src.iter()
                    .map(|&cur| {
                        let t = self.table[prev * self.vocab + cur];
                        prev = cur;
                        t
                    })
                    .collect()
            }
        };
        out.push(END_ID);
        out
    }

    pub fn example(&self, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
        let len = rng.between(self.min_len, self.max_len);
        let src: Vec<usize> = (0..len)
            .map(|_| rng.between(FIRST_PAYLOAD, self.vocab - 1))
            .collect();
        let tgt = self.target_for(&src);
        (src, tgt)
    }

    pub fn batch(&self, rng: &mut Rng, size: usize) -> Result<Batch> {
        let pairs: Vec<_> = (0..size).map(|_| self.example(rng)).collect();
        Batch::from_pairs(&pairs)
    }
}

/// Training batches plus a fixed held-out evaluation set.
pub trait Dataset {
    fn train_batch(&mut self, size: usize) -> Result<Batch>;
    fn eval_set(&self) -> &[Batch];
    /// `(source, target)` vocabulary sizes.
    fn vocab_sizes(&self) -> (usize, usize);
}

/// An endless seeded stream from a [`SynthTask`].
#[derive(Debug, Clone)]
pub struct SynthData {
    pub task: SynthTask,
    rng: Rng,
    eval: Vec<Batch>,
}

impl SynthData {
    pub fn new(
        task: SynthTask,
        seed: u64,
        eval_batches: usize,
        eval_batch_size: usize,
    ) -> Result<Self> {
        let mut base = Rng::seed(seed);
        let rng = base.fork();
        let mut eval_rng = base.fork();
        let eval = (0..eval_batches)
            .map(|_| task.batch(&mut eval_rng, eval_batch_size))
            .collect::<Result<_>>()?;
        Ok(Self { task, rng, eval })
    }
}

impl Dataset for SynthData {
    fn train_batch(&mut self, size: usize) -> Result<Batch> {
        self.task.batch(&mut self.rng, size)
    }

    fn eval_set(&self) -> &[Batch] {
        &self.eval
    }

    fn vocab_sizes(&self) -> (usize, usize) {
        (self.task.vocab, self.task.vocab)
    }
}

/// Whitespace-token vocabulary with the reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < MIN_VOCAB || tokens[..4] != RESERVED {
            return Err(Error::Input(format!(
                "vocabulary must start with {RESERVED:?} and hold at least one more token"
            )));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Tokens seen at least `min_count` times, most frequent first, ties in
    /// byte order.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, n)| n >= min_count.max(1) && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace()
            .map(|t| self.index.get(t).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Tokens up to the first `END`, reserved ids other than UNK dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&t| t != END_ID)
            .filter(|&&t| t >= UNK_ID && t < self.tokens.len())
            .map(|&t| self.tokens[t].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Aligned parallel text, one sequence per line.
#[derive(Debug, Clone)]
pub struct CorpusData {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    train: Vec<(Vec<usize>, Vec<usize>)>,
    order: Vec<usize>,
    cursor: usize,
    repeat: bool,
    rng: Rng,
    eval: Vec<Batch>,
}

impl CorpusData {
    /// Hold out the last `holdout` pairs for evaluation. Vocabularies are
    /// built from the training part only.
    pub fn new(
        src_lines: &[String],
        tgt_lines: &[String],
        min_count: usize,
        holdout: usize,
        repeat: bool,
        eval_batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if src_lines.len() != tgt_lines.len() {
            return Err(Error::Input(format!(
                "corpus sides differ in length: {} source vs {} target lines",
                src_lines.len(),
                tgt_lines.len()
            )));
        }
        let usable: Vec<(&str, &str)> = src_lines
            .iter()
            .zip(tgt_lines)
            .map(|(s, t)| (s.as_str(), t.as_str()))
            .filter(|(s, _)| !s.trim().is_empty())
            .collect();
        if usable.len() <= holdout {
            return Err(Error::Input(format!(
                "{} usable corpus pairs leave nothing to train on after holding out {holdout}",
                usable.len()
            )));
        }
        let split = usable.len() - holdout;
        let src_vocab = Vocab::build(usable[..split].iter().map(|p| p.0), min_count)?;
        let tgt_vocab = Vocab::build(usable[..split].iter().map(|p| p.1), min_count)?;
        let pairs: Vec<_> = usable
            .iter()
            .map(|(s, t)| {
                let mut tgt = tgt_vocab.encode(t);
                tgt.push(END_ID);
                (src_vocab.encode(s), tgt)
            })
            .collect();
        let eval = pairs[split..]
            .chunks(eval_batch_size.max(1))
            .map(Batch::from_pairs)
            .collect::<Result<_>>()?;
        let mut rng = Rng::seed(seed);
        let mut order: Vec<usize> = (0..split).collect();
        shuffle(&mut order, &mut rng);
        Ok(Self {
            src_vocab,
            tgt_vocab,
            train: pairs[..split].to_vec(),
            order,
            cursor: 0,
            repeat,
            rng,
            eval,
        })
    }

    pub fn from_files(
        src: &Path,
        tgt: &Path,
        min_count: usize,
        holdout: usize,
        repeat: bool,
        eval_batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let read = |p: &Path| -> Result<Vec<String>> {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(text.lines().map(str::to_string).collect())
        };
        Self::new(
            &read(src)?,
            &read(tgt)?,
            min_count,
            holdout,
            repeat,
            eval_batch_size,
            seed,
        )
    }
}

fn shuffle(v: &mut [usize], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.below(i + 1));
    }
}

impl Dataset for CorpusData {
    fn train_batch(&mut self, size: usize) -> Result<Batch> {
        let mut pairs = Vec::with_capacity(size);
        while pairs.len() < size {
            if self.cursor == self.order.len() {
                if !self.repeat {
                    return Err(Error::Input(format!(
                        "training corpus exhausted after {} pairs and repeat is off",
                        self.order.len()
                    )));
                }
                shuffle(&mut self.order, &mut self.rng);
                self.cursor = 0;
            }
            pairs.push(self.train[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        Batch::from_pairs(&pairs)
    }

    fn eval_set(&self) -> &[Batch] {
        &self.eval
    }

    fn vocab_sizes(&self) -> (usize, usize) {
        (self.src_vocab.len(), self.tgt_vocab.len())
    }
}
