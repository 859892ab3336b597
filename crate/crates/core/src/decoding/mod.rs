//! Greedy and beam-search generation.
//!
//! Hypotheses hold generated tokens only (no leading `START`). `END` counts
//! toward the length, and a hypothesis that reaches the length limit without
//! `END` is finished as it stands.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SliceNet, TokenBatch, END_ID, PAD_ID, START_ID};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Length-penalty exponent; 0 ranks by raw log-probability.
    pub alpha: f64,
    /// Generated-token limit, `END` included. `None` means `2·|src| + 8`.
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            alpha: 0.6,
            max_len: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.max_len == Some(0) {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }

    pub fn max_len_for(&self, src_len: usize) -> usize {
        self.max_len.unwrap_or(2 * src_len + 8)
    }
}

/// `((5 + len) / 6)^alpha`
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len(), alpha)
    }
}

/// Best first: higher score, then shorter, then lexicographically smaller.
pub fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .total_cmp(&a.score(alpha))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Ids a decoder may emit.
fn emittable(id: usize) -> bool {
    id != PAD_ID && id != START_ID
}

/// Emittable ids in order of decreasing log-probability, ties to the
/// smaller id.
fn ranked_tokens(log_probs: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..log_probs.len()).filter(|&i| emittable(i)).collect();
    ids.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]).then(a.cmp(&b)));
    ids
}

/// A source encoded once for repeated decoder queries.
struct Source<'a> {
    model: &'a SliceNet,
    encoding: Tensor,
}

impl<'a> Source<'a> {
    fn new(model: &'a SliceNet, src: &[usize]) -> Result<Self> {
        if src.is_empty() {
            return Err(Error::Input("empty source sequence".into()));
        }
        let batch = TokenBatch::new(src.to_vec(), 1, src.len())?;
        let (encoding, _) = model.encode_values(&batch)?;
        Ok(Self { model, encoding })
    }

    /// Next-token log-probabilities after each hypothesis (equal lengths).
    fn next(&self, hyps: &[&Hypothesis]) -> Result<Vec<Vec<f64>>> {
        let prefixes: Vec<Vec<usize>> = hyps
            .iter()
            .map(|h| {
                std::iter::once(START_ID)
                    .chain(h.tokens.iter().copied())
                    .collect()
            })
            .collect();
        self.model.next_log_probs(&self.encoding, &prefixes)
    }

    fn score(&self, tokens: &[usize]) -> Result<f64> {
        if tokens.is_empty() {
            return Ok(0.0);
        }
        let mut dec_in = vec![START_ID];
        dec_in.extend_from_slice(&tokens[..tokens.len() - 1]);
        let dec_in = TokenBatch::new(dec_in, 1, tokens.len())?;
        let lp = self.model.decode_log_probs(
            &self.encoding,
            &vec![true; self.encoding.shape()[1]],
            &dec_in,
        )?;
        let v = lp.depth();
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(t, &id)| lp.data()[t * v + id])
            .sum())
    }
}

/// Append the argmax token until `END` or the length limit.
pub fn greedy_decode(
    model: &SliceNet,
    src: &[usize],
    max_len: Option<usize>,
) -> Result<Hypothesis> {
    let source = Source::new(model, src)?;
    let limit = max_len.unwrap_or(2 * src.len() + 8);
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while !hyp.finished {
        let lp = source.next(&[&hyp])?.remove(0);
        let best = ranked_tokens(&lp)[0];
        hyp.tokens.push(best);
        hyp.log_prob += lp[best];
        hyp.finished = best == END_ID || hyp.tokens.len() >= limit;
    }
    Ok(hyp)
}

/// Beam search with length penalty. Each live hypothesis is extended by its
/// top `beam_size` tokens; finished ones stay in the pool and compete for
/// the `beam_size` slots kept each step.
pub fn beam_search(model: &SliceNet, src: &[usize], cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let source = Source::new(model, src)?;
    let limit = cfg.max_len_for(src.len());
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    while beam.iter().any(|h| !h.finished) {
        let live: Vec<&Hypothesis> = beam.iter().filter(|h| !h.finished).collect();
        let dists = source.next(&live)?;
        let mut pool: Vec<Hypothesis> = beam.iter().filter(|h| h.finished).cloned().collect();
        for (h, lp) in live.iter().zip(&dists) {
            for id in ranked_tokens(lp).into_iter().take(cfg.beam_size) {
                let mut tokens = h.tokens.clone();
                tokens.push(id);
                let finished = id == END_ID || tokens.len() >= limit;
                pool.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + lp[id],
                    finished,
                });
            }
        }
        pool.sort_by(|a, b| rank(a, b, cfg.alpha));
        pool.truncate(cfg.beam_size);
        beam = pool;
    }
    Ok(beam.swap_remove(0))
}

/// Teacher-forced sum of log-probabilities of `tokens` after `START`.
pub fn score_sequence(model: &SliceNet, src: &[usize], tokens: &[usize]) -> Result<f64> {
    Source::new(model, src)?.score(tokens)
}

/// Decode many sources in parallel; results keep input order.
pub fn decode_all(
    model: &SliceNet,
    sources: &[Vec<usize>],
    cfg: &DecodeConfig,
) -> Vec<Result<Hypothesis>> {
    sources
        .par_iter()
        .map(|src| beam_search(model, src, cfg))
        .collect()
}
