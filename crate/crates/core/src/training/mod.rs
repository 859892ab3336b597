//! Loss and metrics, the optimiser, the training loop and its data.

mod data;
mod optim;

pub use data::{
    Batch, CorpusData, Dataset, SynthData, SynthTask, TaskKind, Vocab, FIRST_PAYLOAD, UNK_ID,
};
pub use optim::{Adam, AdamConfig};

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SliceNet;
use crate::tensor::{Rng, Tape, Tensor};

/// Sums over the unmasked tokens of a logits tensor.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TokenStats {
    pub log_prob: f64,
    pub correct: usize,
    pub count: usize,
}

impl TokenStats {
    pub fn merge(self, other: Self) -> Self {
        Self {
            log_prob: self.log_prob + other.log_prob,
            correct: self.correct + other.correct,
            count: self.count + other.count,
        }
    }

    pub fn neg_log_ppl(&self) -> Result<f64> {
        self.nonempty()?;
        Ok(self.log_prob / self.count as f64)
    }

    pub fn accuracy(&self) -> Result<f64> {
        self.nonempty()?;
        Ok(self.correct as f64 / self.count as f64)
    }

    fn nonempty(&self) -> Result<()> {
        if self.count == 0 {
            Err(Error::Input("every position is masked".into()))
        } else {
            Ok(())
        }
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn token_stats(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<TokenStats> {
    let v = logits.depth();
    let rows = logits.rows();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Input(format!(
            "{} targets and {} mask entries for {rows} logit rows",
            targets.len(),
            mask.len()
        )));
    }
    let mut stats = TokenStats::default();
    for (r, row) in logits.data().chunks(v).enumerate() {
        if !mask[r] {
            continue;
        }
        let t = targets[r];
        if t >= v {
            return Err(Error::Input(format!(
                "target {t} outside vocabulary of {v}"
            )));
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        stats.log_prob += row[t] - lse;
        stats.correct += usize::from(argmax(row) == t);
        stats.count += 1;
    }
    Ok(stats)
}

/// Mean log-probability of the true token over unmasked positions (≤ 0).
pub fn neg_log_perplexity(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    token_stats(logits, targets, mask)?.neg_log_ppl()
}

/// Fraction of unmasked positions whose argmax is the target.
pub fn per_token_accuracy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    token_stats(logits, targets, mask)?.accuracy()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Apply the model's dropout while training.
    pub dropout: bool,
    pub eval_every: usize,
    pub eval_batches: usize,
    /// Stop at the first evaluation reaching this accuracy.
    pub stop_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            seed: 1,
            dropout: true,
            eval_every: 100,
            eval_batches: 4,
            stop_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_batches == 0 {
            return Err(Error::Config(
                "batch_size, eval_every and eval_batches must be positive".into(),
            ));
        }
        if let Some(a) = self.stop_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("stop_accuracy {a} outside [0, 1]")));
            }
        }
        self.optimizer.validate()
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean training loss since the previous record (the eval loss at step 0).
    pub loss: f64,
    pub neg_log_ppl: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Training loss of every step, step 1 first.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    pub best: Option<EvalRecord>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

/// Teacher-forced training loss on one batch, gradients left on `tape`.
pub fn batch_loss(
    model: &SliceNet,
    tape: &mut Tape,
    batch: &Batch,
    dropout_rng: Option<&mut Rng>,
) -> Result<(crate::model::Binding, crate::tensor::Var)> {
    let bind = model.store.bind(tape, true);
    let logits = model.forward(tape, &bind, &batch.src, &batch.tgt, dropout_rng)?;
    let loss = tape.cross_entropy(logits, &batch.tgt.ids, &batch.target_weights())?;
    Ok((bind, loss))
}

/// Forward, backward and one optimiser update. Returns the loss.
pub fn train_step(
    model: &mut SliceNet,
    adam: &mut Adam,
    batch: &Batch,
    dropout_rng: Option<&mut Rng>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (bind, loss) = batch_loss(model, &mut tape, batch, dropout_rng)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    tape.backward(loss)?;
    let grads: Vec<Option<&Tensor>> = bind.vars().iter().map(|&v| tape.grad(v)).collect();
    adam.update(&mut model.store, &grads)?;
    Ok(value)
}

/// Dropout-free token statistics over a set of batches.
pub fn evaluate(model: &SliceNet, batches: &[Batch]) -> Result<TokenStats> {
    let mut total = TokenStats::default();
    for b in batches {
        let mut tape = Tape::new();
        let bind = model.store.bind(&mut tape, false);
        let logits = model.forward(&mut tape, &bind, &b.src, &b.tgt, None)?;
        let stats = token_stats(tape.value(logits), &b.tgt.ids, &b.tgt.mask())?;
        total = total.merge(stats);
    }
    Ok(total)
}

/// Where the training loop writes its files.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub checkpoint: PathBuf,
    pub best: PathBuf,
    pub metrics: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("checkpoint.bin"),
            best: dir.join("best.bin"),
            metrics: dir.join("metrics.jsonl"),
        }
    }
}

/// Seed of the dropout stream for a training seed.
fn dropout_seed(seed: u64) -> u64 {
    seed ^ 0x00d2_0f0a_7e5e_ed00
}

/// Train `model` on `data`, evaluating at step 0, every `eval_every` steps
/// and at the last step. With `out`, metrics are appended per evaluation,
/// `best` is rewritten whenever the held-out log-probability improves and
/// `checkpoint` is written at the end.
pub fn train_loop(
    model: &mut SliceNet,
    data: &mut dyn Dataset,
    cfg: &TrainConfig,
    out: Option<&OutputPaths>,
    mut on_eval: impl FnMut(&EvalRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut adam = Adam::new(cfg.optimizer, &model.store);
    let mut rng = Rng::seed(dropout_seed(cfg.seed));
    let mut metrics = match out {
        Some(o) => Some(File::create(&o.metrics).map_err(|e| Error::io(&o.metrics, e))?),
        None => None,
    };
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.steps),
        evals: Vec::new(),
        best: None,
        stopped_early: false,
    };
    let mut window = Vec::new();

    for step in 0..=cfg.steps {
        if step > 0 {
            let batch = data.train_batch(cfg.batch_size)?;
            let loss = train_step(model, &mut adam, &batch, cfg.dropout.then_some(&mut rng))?;
            report.losses.push(loss);
            window.push(loss);
        }
        if step % cfg.eval_every != 0 && step != cfg.steps {
            continue;
        }
        let stats = evaluate(model, data.eval_set())?;
        let neg_log_ppl = stats.neg_log_ppl()?;
        let loss = if window.is_empty() {
            -neg_log_ppl
        } else {
            window.iter().sum::<f64>() / window.len() as f64
        };
        window.clear();
        let record = EvalRecord {
            step,
            loss,
            neg_log_ppl,
            accuracy: stats.accuracy()?,
        };
        if let (Some(f), Some(o)) = (metrics.as_mut(), out) {
            let line = serde_json::to_string(&record).expect("plain record serialises");
            writeln!(f, "{line}").map_err(|e| Error::io(&o.metrics, e))?;
        }
        if report
            .best
            .is_none_or(|b| record.neg_log_ppl > b.neg_log_ppl)
        {
            report.best = Some(record);
            if let Some(o) = out {
                model.store.save(&o.best)?;
            }
        }
        on_eval(&record);
        report.evals.push(record);
        if cfg.stop_accuracy.is_some_and(|a| record.accuracy >= a) {
            report.stopped_early = step < cfg.steps;
            break;
        }
    }
    if let Some(o) = out {
        model.store.save(&o.checkpoint)?;
    }
    Ok(report)
}

/// Append-only metrics reader, one record per line.
pub fn read_metrics(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
        })
        .collect()
}
