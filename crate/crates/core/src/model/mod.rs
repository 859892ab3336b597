//! The full encoder / mixer / decoder network.
//!
//! ```text
//! encoded = ConvModule^N(embed(src) + timing)                    Same padding
//! mix     = ConvStep_k3([attention(encoded, o); o])              o = embed(START ++ tgt[..-1])
//! h       = (ConvModule(h) + attention(encoded, h))^M            Causal padding
//! logits  = h · Eᵀ / sqrt(c)                                     E tied to the target embedding
//! ```

mod params;

pub use params::{parse_checkpoint, Binding, Param, ParamId, ParamStore, CHECKPOINT_MAGIC};

use serde::{Deserialize, Serialize};

use crate::convops::{ConvMode, ConvSpec, Padding};
use crate::error::{Error, Result};
use crate::layers::{
    self, AttentionModule, AttentionScale, ConvModule, ConvModuleConfig, ConvStep, ATTENTION_STEPS,
    DEFAULT_DROPOUT, DEFAULT_MODULE_STEPS, DEFAULT_RESIDUAL_AFTER,
};
use crate::tensor::{Rng, Tape, Tensor, Var};

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;
/// Smallest vocabulary: the three reserved ids plus one payload token.
pub const MIN_VOCAB: usize = 4;

/// Embedding entries start uniform in `±EMBEDDING_INIT` (variance 1/4).
/// The tied projection reuses this table, so its scale sets the spread of
/// the initial logits; at variance 1/4 the step-0 loss sits near log V.
pub const EMBEDDING_INIT: f64 = 0.866_025_403_784_438_6;

/// Filter size and dilation of one convolution step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepShape {
    pub k: usize,
    pub d: usize,
}

impl StepShape {
    pub const fn new(k: usize, d: usize) -> Self {
        Self { k, d }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Separability {
    Full,
    #[default]
    Separable,
    SubSeparable,
    SuperSeparable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature depth `c`; must be even for the timing signal.
    pub depth: usize,
    /// Source vocabulary size, reserved ids included. 0 means "from data".
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub encoder_modules: usize,
    pub decoder_modules: usize,
    pub module_steps: Vec<StepShape>,
    pub residual_after: Vec<usize>,
    pub dropout: f64,
    pub mixer: StepShape,
    pub attention_steps: Vec<StepShape>,
    pub separability: Separability,
    /// Group counts cycled over the conv steps in build order. Empty picks
    /// `[16]` for sub-separable and `[2, 3]` for super-separable.
    pub groups: Vec<usize>,
    pub attention_scale: AttentionScale,
    pub share_attention_kernels: bool,
    pub tie_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 64,
            vocab_src: 0,
            vocab_tgt: 0,
            encoder_modules: 6,
            decoder_modules: 4,
            module_steps: DEFAULT_MODULE_STEPS
                .iter()
                .map(|&(k, d)| StepShape::new(k, d))
                .collect(),
            residual_after: DEFAULT_RESIDUAL_AFTER.to_vec(),
            dropout: DEFAULT_DROPOUT,
            mixer: StepShape::new(3, 1),
            attention_steps: ATTENTION_STEPS
                .iter()
                .map(|&(k, d)| StepShape::new(k, d))
                .collect(),
            separability: Separability::Separable,
            groups: Vec::new(),
            attention_scale: AttentionScale::Outside,
            share_attention_kernels: false,
            tie_projection: true,
        }
    }
}

impl ModelConfig {
    /// Group schedule actually in force.
    pub fn group_schedule(&self) -> Vec<usize> {
        match self.separability {
            Separability::Full | Separability::Separable => vec![1],
            _ if !self.groups.is_empty() => self.groups.clone(),
            Separability::SubSeparable => vec![16],
            Separability::SuperSeparable => vec![2, 3],
        }
    }

    /// Mode of the `n`-th conv step in build order.
    pub fn mode_at(&self, n: usize) -> ConvMode {
        let sched = self.group_schedule();
        let g = sched[n % sched.len()];
        match self.separability {
            Separability::Full => ConvMode::Full,
            Separability::Separable => ConvMode::Separable,
            Separability::SubSeparable => ConvMode::SubSeparable { groups: g },
            Separability::SuperSeparable => ConvMode::SuperSeparable { groups: g },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.depth;
        if c == 0 || !c.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "depth must be even and >= 2, got {c}"
            )));
        }
        for (name, v) in [("vocab_src", self.vocab_src), ("vocab_tgt", self.vocab_tgt)] {
            if v < MIN_VOCAB {
                return Err(Error::Config(format!(
                    "{name} must be >= {MIN_VOCAB}, got {v}"
                )));
            }
        }
        if self.module_steps.is_empty() {
            return Err(Error::Config("module_steps must not be empty".into()));
        }
        if self.attention_steps.len() != 2 {
            return Err(Error::Config(format!(
                "attention_steps needs exactly 2 entries, got {}",
                self.attention_steps.len()
            )));
        }
        let shapes = self
            .module_steps
            .iter()
            .chain(&self.attention_steps)
            .chain(std::iter::once(&self.mixer));
        for s in shapes {
            if s.k == 0 || s.d == 0 {
                return Err(Error::Config(format!("step shape {s:?} needs k, d >= 1")));
            }
        }
        for &g in &self.group_schedule() {
            if g == 0 || !c.is_multiple_of(g) {
                return Err(Error::Config(format!(
                    "group count {g} must divide depth {c}"
                )));
            }
        }
        self.module_config(Padding::Same, &mut 0).validate()?;
        Ok(())
    }

    /// Every convolution step in build order, without allocating kernels.
    pub fn conv_layers(&self) -> Vec<ConvLayerInfo> {
        let mut out = Vec::new();
        let mut counter = 0;
        let share = self.share_attention_kernels;
        let mut push = |name: String, spec: ConvSpec, shared: bool| {
            out.push(ConvLayerInfo {
                name,
                spec,
                shared_kernels: shared,
            })
        };
        for i in 0..self.encoder_modules {
            let cfg = self.module_config(Padding::Same, &mut counter);
            for (j, spec) in cfg.steps.into_iter().enumerate() {
                push(
                    format!("encoder/module{}/step{}", i + 1, j + 1),
                    spec,
                    false,
                );
            }
        }
        let [a, b] = self.attention_specs(&mut counter);
        push("mixer/attention/step1".into(), a, false);
        push("mixer/attention/step2".into(), b, share);
        push("mixer/step".into(), self.mixer_spec(&mut counter), false);
        for i in 0..self.decoder_modules {
            let cfg = self.module_config(Padding::Causal, &mut counter);
            for (j, spec) in cfg.steps.into_iter().enumerate() {
                push(
                    format!("decoder/module{}/conv/step{}", i + 1, j + 1),
                    spec,
                    false,
                );
            }
            let [a, b] = self.attention_specs(&mut counter);
            push(format!("decoder/module{}/attention/step1", i + 1), a, false);
            push(format!("decoder/module{}/attention/step2", i + 1), b, share);
        }
        out
    }

    /// The IOMixer step, `2c -> c`.
    fn mixer_spec(&self, counter: &mut usize) -> ConvSpec {
        let spec = ConvSpec::new(
            self.mixer.k,
            self.mixer.d,
            self.mode_at(*counter),
            self.depth,
            Padding::Causal,
        )
        .with_channels(2 * self.depth, self.depth);
        *counter += 1;
        spec
    }

    fn module_config(&self, padding: Padding, counter: &mut usize) -> ConvModuleConfig {
        let steps = self
            .module_steps
            .iter()
            .map(|s| {
                let spec = ConvSpec::new(s.k, s.d, self.mode_at(*counter), self.depth, padding);
                *counter += 1;
                spec
            })
            .collect();
        ConvModuleConfig {
            steps,
            residual_after: self.residual_after.clone(),
            dropout: self.dropout,
        }
    }

    fn attention_specs(&self, counter: &mut usize) -> [ConvSpec; 2] {
        let first = self.mode_at(*counter);
        let second = if self.share_attention_kernels {
            first
        } else {
            self.mode_at(*counter + 1)
        };
        *counter += 2;
        let [a, b] = [self.attention_steps[0], self.attention_steps[1]];
        [
            ConvSpec::new(a.k, a.d, first, self.depth, Padding::Causal),
            ConvSpec::new(b.k, b.d, second, self.depth, Padding::Causal),
        ]
    }
}

/// Right-padded token ids `[batch, len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, len: usize) -> Result<Self> {
        if batch == 0 || len == 0 || ids.len() != batch * len {
            return Err(Error::Input(format!(
                "{} ids for a [{batch}, {len}] token batch",
                ids.len()
            )));
        }
        Ok(Self { ids, batch, len })
    }

    /// Stack rows, padding each on the right with [`PAD_ID`].
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD_ID, len - r.len()));
        }
        Self::new(ids, rows.len(), len)
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    /// `true` at real tokens, `false` at padding.
    pub fn mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD_ID).collect()
    }

    /// Decoder input: `START` followed by all but the last target token.
    pub fn shifted_right(&self) -> Self {
        let mut ids = Vec::with_capacity(self.ids.len());
        for b in 0..self.batch {
            ids.push(START_ID);
            ids.extend_from_slice(&self.row(b)[..self.len - 1]);
        }
        Self {
            ids,
            batch: self.batch,
            len: self.len,
        }
    }
}

/// One decoder block: a causal conv module plus attention to the source.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModule<T> {
    pub conv: ConvModule<T>,
    pub attention: AttentionModule<T>,
}

/// Source encoding on a tape, with its padding mask.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub output: Var,
    pub mask: Vec<bool>,
}

/// One convolution step of the built model, for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerInfo {
    pub name: String,
    pub spec: ConvSpec,
    /// Kernels owned by an earlier step.
    pub shared_kernels: bool,
}

#[derive(Debug, Clone)]
pub struct SliceNet {
    config: ModelConfig,
    pub store: ParamStore,
    src_embedding: ParamId,
    tgt_embedding: ParamId,
    encoder: Vec<ConvModule<ParamId>>,
    mixer_attention: AttentionModule<ParamId>,
    mixer: ConvStep<ParamId>,
    decoder: Vec<DecoderModule<ParamId>>,
    projection: Option<ParamId>,
}

fn register_step(
    store: &mut ParamStore,
    prefix: &str,
    step: &ConvStep<Tensor>,
    shared_kernels: Option<&ConvStep<ParamId>>,
) -> Result<ConvStep<ParamId>> {
    let mut ids = Vec::new();
    let kernel_count = step.kernels.named().len();
    for (i, (name, value)) in step.named().into_iter().enumerate() {
        let id = match shared_kernels {
            Some(owner) if i < kernel_count => *owner.kernels.named()[i].1,
            _ => store.insert(format!("{prefix}/{name}"), value.clone(), false)?,
        };
        ids.push(id);
    }
    let mut it = ids.into_iter();
    Ok(step.map(|_| it.next().expect("one id per parameter")))
}

fn register_module(
    store: &mut ParamStore,
    prefix: &str,
    module: &ConvModule<Tensor>,
) -> Result<ConvModule<ParamId>> {
    let steps = module
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| register_step(store, &format!("{prefix}/step{}", i + 1), s, None))
        .collect::<Result<_>>()?;
    Ok(ConvModule {
        steps,
        residual_after: module.residual_after.clone(),
        dropout: module.dropout,
    })
}

fn register_attention(
    store: &mut ParamStore,
    prefix: &str,
    specs: [ConvSpec; 2],
    share: bool,
    rng: &mut Rng,
) -> Result<AttentionModule<ParamId>> {
    let values = AttentionModule::init(specs, rng)?;
    let first = register_step(store, &format!("{prefix}/step1"), &values.first, None)?;
    let second = register_step(
        store,
        &format!("{prefix}/step2"),
        &values.second,
        share.then_some(&first),
    )?;
    Ok(AttentionModule { first, second })
}

impl SliceNet {
    /// Build with freshly initialised parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed(seed);
        let mut store = ParamStore::new();
        let c = config.depth;
        let mut counter = 0usize;

        let src_embedding = store.insert(
            "encoder/embedding",
            Tensor::uniform(&[config.vocab_src, c], EMBEDDING_INIT, &mut rng),
            true,
        )?;
        let tgt_embedding = store.insert(
            "decoder/embedding",
            Tensor::uniform(&[config.vocab_tgt, c], EMBEDDING_INIT, &mut rng),
            true,
        )?;

        let mut encoder = Vec::new();
        for i in 0..config.encoder_modules {
            let cfg = config.module_config(Padding::Same, &mut counter);
            let values = ConvModule::init(&cfg, &mut rng)?;
            encoder.push(register_module(
                &mut store,
                &format!("encoder/module{}", i + 1),
                &values,
            )?);
        }

        let specs = config.attention_specs(&mut counter);
        let mixer_attention = register_attention(
            &mut store,
            "mixer/attention",
            specs,
            config.share_attention_kernels,
            &mut rng,
        )?;
        let mixer_spec = config.mixer_spec(&mut counter);
        let mixer = register_step(
            &mut store,
            "mixer/step",
            &ConvStep::init(mixer_spec, &mut rng)?,
            None,
        )?;

        let mut decoder = Vec::new();
        for i in 0..config.decoder_modules {
            let prefix = format!("decoder/module{}", i + 1);
            let cfg = config.module_config(Padding::Causal, &mut counter);
            let values = ConvModule::init(&cfg, &mut rng)?;
            let conv = register_module(&mut store, &format!("{prefix}/conv"), &values)?;
            let specs = config.attention_specs(&mut counter);
            let attention = register_attention(
                &mut store,
                &format!("{prefix}/attention"),
                specs,
                config.share_attention_kernels,
                &mut rng,
            )?;
            decoder.push(DecoderModule { conv, attention });
        }

        let projection = if config.tie_projection {
            None
        } else {
            let bound = (6.0 / (c + config.vocab_tgt) as f64).sqrt();
            Some(store.insert(
                "decoder/projection",
                Tensor::uniform(&[c, config.vocab_tgt], bound, &mut rng),
                false,
            )?)
        };

        Ok(Self {
            config,
            store,
            src_embedding,
            tgt_embedding,
            encoder,
            mixer_attention,
            mixer,
            decoder,
            projection,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(embedding, non-embedding)` parameter counts.
    pub fn count_parameters(&self) -> (usize, usize) {
        self.store.counts()
    }

    /// Every convolution step in build order.
    pub fn conv_layers(&self) -> Vec<ConvLayerInfo> {
        self.config.conv_layers()
    }

    fn check_ids(batch: &TokenBatch, vocab: usize, side: &str) -> Result<()> {
        match batch.ids.iter().find(|&&t| t >= vocab) {
            Some(t) => Err(Error::Input(format!(
                "{side} token id {t} outside vocabulary of {vocab}"
            ))),
            None => Ok(()),
        }
    }

    /// Embed, add timing, run the encoder modules. Padding rows are held at
    /// zero throughout so a padded source encodes exactly like its unpadded
    /// prefix.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        src: &TokenBatch,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Encoded> {
        Self::check_ids(src, self.config.vocab_src, "source")?;
        let mask = src.mask();
        if (0..src.batch).any(|b| !mask[b * src.len..(b + 1) * src.len].contains(&true)) {
            return Err(Error::Input("empty source sequence".into()));
        }
        let rows: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let table = bind.var(self.src_embedding);
        let emb = tape.embedding(table, &src.ids, &[src.batch, src.len])?;
        let timed = layers::add_timing(tape, emb)?;
        let mut h = tape.scale_rows(timed, &rows)?;
        for module in &self.encoder {
            let bound = module.map(|&id| bind.var(id));
            h = layers::conv_module_masked(
                tape,
                h,
                &bound,
                Some(&rows),
                dropout_rng.as_deref_mut(),
            )?;
        }
        Ok(Encoded { output: h, mask })
    }

    /// Logits `[batch, len, vocab_tgt]` for a decoder input that already
    /// starts with `START`.
    pub fn decode_logits(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        encoded: &Encoded,
        dec_in: &TokenBatch,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        Self::check_ids(dec_in, self.config.vocab_tgt, "target")?;
        let src_batch = tape.shape(encoded.output)[0];
        if src_batch != dec_in.batch {
            return Err(Error::Input(format!(
                "source batch {src_batch} != target batch {}",
                dec_in.batch
            )));
        }
        let scale = self.config.attention_scale;
        let mask = Some(encoded.mask.as_slice());
        let table = bind.var(self.tgt_embedding);
        let o = tape.embedding(table, &dec_in.ids, &[dec_in.batch, dec_in.len])?;

        let attn = self.mixer_attention.map(|&id| bind.var(id));
        let a = layers::attention_module(tape, encoded.output, o, &attn, mask, scale)?;
        let joined = tape.concat(&[a, o])?;
        let mixer = self.mixer.map(|&id| bind.var(id));
        let mut h = layers::conv_step(tape, joined, &mixer)?;

        for block in &self.decoder {
            let conv = block.conv.map(|&id| bind.var(id));
            let attn = block.attention.map(|&id| bind.var(id));
            let c = layers::conv_module(tape, h, &conv, dropout_rng.as_deref_mut())?;
            let a = layers::attention_module(tape, encoded.output, h, &attn, mask, scale)?;
            h = tape.add(c, a)?;
        }

        let proj = match self.projection {
            Some(id) => bind.var(id),
            None => tape.transpose(table)?,
        };
        let logits = tape.matmul(h, proj)?;
        Ok(tape.scale(logits, 1.0 / (self.config.depth as f64).sqrt()))
    }

    /// Teacher-forced logits for `tgt` (decoder input is `tgt` shifted right).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        src: &TokenBatch,
        tgt: &TokenBatch,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let enc = self.encode(tape, bind, src, dropout_rng.as_deref_mut())?;
        self.decode_logits(tape, bind, &enc, &tgt.shifted_right(), dropout_rng)
    }

    /// Inference-mode encoding `[batch, len, c]` and its padding mask.
    pub fn encode_values(&self, src: &TokenBatch) -> Result<(Tensor, Vec<bool>)> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &bind, src, None)?;
        Ok((tape.value(enc.output).clone(), enc.mask))
    }

    /// Inference-mode log-probabilities `[batch, len, vocab_tgt]` given a
    /// precomputed encoding.
    pub fn decode_log_probs(
        &self,
        encoding: &Tensor,
        mask: &[bool],
        dec_in: &TokenBatch,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape, false);
        let enc = Encoded {
            output: tape.constant(encoding.clone()),
            mask: mask.to_vec(),
        };
        let logits = self.decode_logits(&mut tape, &bind, &enc, dec_in, None)?;
        Ok(log_softmax(tape.value(logits)))
    }

    /// Next-token log-probabilities after each prefix. Prefixes start with
    /// `START` and share one length; `encoding` is a single source `[1, m, c]`.
    pub fn next_log_probs(
        &self,
        encoding: &Tensor,
        prefixes: &[Vec<usize>],
    ) -> Result<Vec<Vec<f64>>> {
        let (one, m, c) = encoding.dims3();
        if one != 1 {
            return Err(Error::Input("next_log_probs takes a single source".into()));
        }
        let dec_in = TokenBatch::from_rows(prefixes)?;
        if prefixes.iter().any(|p| p.len() != dec_in.len) {
            return Err(Error::Input("prefixes must share one length".into()));
        }
        let b = prefixes.len();
        let tiled = Tensor::from_fn(&[b, m, c], |i| encoding.data()[i % (m * c)]);
        let mask = vec![true; b * m];
        let lp = self.decode_log_probs(&tiled, &mask, &dec_in)?;
        let v = self.config.vocab_tgt;
        let n = dec_in.len;
        Ok((0..b)
            .map(|r| lp.data()[((r * n) + n - 1) * v..((r * n) + n) * v].to_vec())
            .collect())
    }
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let v = logits.depth();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(v) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= lse);
    }
    out
}

#[cfg(test)]
mod tests;
