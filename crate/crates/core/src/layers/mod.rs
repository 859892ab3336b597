//! Building blocks of the network: layer norm, convolution steps and
//! modules, the sinusoidal timing signal and inner-product attention.
//!
//! Layer structs are generic over their parameter payload `T`, so the same
//! description holds tensors (initial values), parameter-store ids, or tape
//! handles bound for one forward pass. Forward functions take `Var`s.

use serde::{Deserialize, Serialize};

use crate::convops::{self, ConvError, ConvMode, ConvSpec, KernelSet, Padding, Result};
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Stabiliser added to the variance inside layer norm.
pub const LN_EPS: f64 = 1e-6;

/// `(k, dilation)` of the four steps of a standard convolution module.
pub const DEFAULT_MODULE_STEPS: [(usize, usize); 4] = [(3, 1), (3, 1), (15, 1), (15, 8)];

/// Steps (1-based) after which the module input is added back.
pub const DEFAULT_RESIDUAL_AFTER: [usize; 2] = [2, 4];

pub const DEFAULT_DROPOUT: f64 = 0.5;

/// `(k, dilation)` of the two attention convolution steps.
pub const ATTENTION_STEPS: [(usize, usize); 2] = [(5, 1), (5, 4)];

fn config_error(msg: impl Into<String>) -> ConvError {
    ConvError::Config(msg.into())
}

/// Scalar gain and bias of one normalisation site.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: T,
    pub bias: T,
}

impl<T> LayerNormParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

impl LayerNormParams<Tensor> {
    pub fn new(gain: f64, bias: f64) -> Self {
        Self {
            gain: Tensor::full(&[1], gain),
            bias: Tensor::full(&[1], bias),
        }
    }
}

/// `G·(x - μ)/σ + B` over the depth axis, population variance.
pub fn layer_norm(tape: &mut Tape, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
    Ok(tape.layer_norm(x, p.gain, p.bias, LN_EPS)?)
}

/// `LN(Conv(ReLU(x)))` with its own kernels and norm scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStep<T> {
    pub spec: ConvSpec,
    pub kernels: KernelSet<T>,
    pub norm: LayerNormParams<T>,
}

impl<T> ConvStep<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ConvStep<U> {
        ConvStep {
            spec: self.spec,
            kernels: self.kernels.map(&mut f),
            norm: self.norm.map(f),
        }
    }

    /// Parameters with stable local names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = self.kernels.named();
        out.push(("ln_gain".into(), &self.norm.gain));
        out.push(("ln_bias".into(), &self.norm.bias));
        out
    }
}

impl ConvStep<Tensor> {
    /// Glorot kernels, `G = 1`, `B = 0`.
    pub fn init(spec: ConvSpec, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            spec,
            kernels: convops::Kernels::init(&spec, rng)?,
            norm: LayerNormParams::new(1.0, 0.0),
        })
    }

    pub fn zeros(spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            spec,
            kernels: convops::Kernels::zeros(&spec)?,
            norm: LayerNormParams::new(1.0, 0.0),
        })
    }
}

pub fn conv_step(tape: &mut Tape, x: Var, step: &ConvStep<Var>) -> Result<Var> {
    let activated = tape.relu(x);
    let conv = convops::apply(tape, &step.spec, &step.kernels, activated)?;
    layer_norm(tape, conv, &step.norm)
}

/// Shape of a convolution module: its steps, residual points and dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvModuleConfig {
    pub steps: Vec<ConvSpec>,
    /// 1-based step indices after which the module input is added.
    pub residual_after: Vec<usize>,
    pub dropout: f64,
}

impl ConvModuleConfig {
    /// The standard four-step module on depth `c`. `mode_of` receives the
    /// step index and picks its separability.
    pub fn standard(
        c: usize,
        padding: Padding,
        mut mode_of: impl FnMut(usize) -> ConvMode,
    ) -> Self {
        Self {
            steps: DEFAULT_MODULE_STEPS
                .iter()
                .enumerate()
                .map(|(i, &(k, d))| ConvSpec::new(k, d, mode_of(i), c, padding))
                .collect(),
            residual_after: DEFAULT_RESIDUAL_AFTER.to_vec(),
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.steps.first() else {
            return Err(config_error("a convolution module needs at least one step"));
        };
        let c = first.c_in;
        for (i, s) in self.steps.iter().enumerate() {
            s.validate()?;
            if s.c_in != c || s.c_out != c {
                return Err(config_error(format!(
                    "module step {} maps {} -> {} channels; residuals need {c} -> {c}",
                    i + 1,
                    s.c_in,
                    s.c_out
                )));
            }
        }
        for &r in &self.residual_after {
            if r == 0 || r > self.steps.len() {
                return Err(config_error(format!(
                    "residual index {r} outside 1..={}",
                    self.steps.len()
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_error(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvModule<T> {
    pub steps: Vec<ConvStep<T>>,
    pub residual_after: Vec<usize>,
    pub dropout: f64,
}

impl<T> ConvModule<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ConvModule<U> {
        ConvModule {
            steps: self.steps.iter().map(|s| s.map(&mut f)).collect(),
            residual_after: self.residual_after.clone(),
            dropout: self.dropout,
        }
    }

    pub fn config(&self) -> ConvModuleConfig {
        ConvModuleConfig {
            steps: self.steps.iter().map(|s| s.spec).collect(),
            residual_after: self.residual_after.clone(),
            dropout: self.dropout,
        }
    }
}

impl ConvModule<Tensor> {
    pub fn init(cfg: &ConvModuleConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            steps: cfg
                .steps
                .iter()
                .map(|&s| ConvStep::init(s, rng))
                .collect::<Result<_>>()?,
            residual_after: cfg.residual_after.clone(),
            dropout: cfg.dropout,
        })
    }

    pub fn zeros(cfg: &ConvModuleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            steps: cfg
                .steps
                .iter()
                .map(|&s| ConvStep::zeros(s))
                .collect::<Result<_>>()?,
            residual_after: cfg.residual_after.clone(),
            dropout: cfg.dropout,
        })
    }
}

/// Run the steps in order, adding the module input after each residual
/// index. Dropout is applied to the output only when `dropout_rng` is given
/// (training).
pub fn conv_module(
    tape: &mut Tape,
    x: Var,
    module: &ConvModule<Var>,
    dropout_rng: Option<&mut Rng>,
) -> Result<Var> {
    conv_module_masked(tape, x, module, None, dropout_rng)
}

/// [`conv_module`] with a per-position weight (1 keep, 0 pad) applied after
/// every step. With the input already masked, padded positions stay zero and
/// never leak into real positions through the convolutions.
pub fn conv_module_masked(
    tape: &mut Tape,
    x: Var,
    module: &ConvModule<Var>,
    row_mask: Option<&[f64]>,
    dropout_rng: Option<&mut Rng>,
) -> Result<Var> {
    module.config().validate()?;
    let mut h = x;
    for (i, step) in module.steps.iter().enumerate() {
        h = conv_step(tape, h, step)?;
        if let Some(mask) = row_mask {
            h = tape.scale_rows(h, mask)?;
        }
        if module.residual_after.contains(&(i + 1)) {
            h = tape.add(x, h)?;
        }
    }
    match dropout_rng {
        Some(rng) => Ok(tape.dropout(h, module.dropout, rng)?),
        None => Ok(h),
    }
}

/// Sinusoidal position signal `[length, depth]`: channel `2i` holds
/// `sin(t / 10000^(2i/depth))`, channel `2i+1` the matching cosine.
pub fn timing_signal(length: usize, depth: usize) -> Result<Tensor> {
    if depth == 0 || !depth.is_multiple_of(2) {
        return Err(config_error(format!(
            "timing signal needs an even depth, got {depth}"
        )));
    }
    if length == 0 {
        return Err(config_error("timing signal needs length >= 1"));
    }
    Ok(Tensor::from_fn(&[length, depth], |idx| {
        let (t, ch) = (idx / depth, idx % depth);
        let i = ch / 2;
        let angle = t as f64 / 10000f64.powf((2 * i) as f64 / depth as f64);
        if ch % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// `x + timing`, with the signal broadcast over the batch.
pub fn add_timing(tape: &mut Tape, x: Var) -> Result<Var> {
    let (b, n, c) = tape.value(x).dims3();
    let signal = timing_signal(n, c)?;
    let tiled = Tensor::from_fn(&[b, n, c], |i| signal.data()[i % (n * c)]);
    let t = tape.constant(tiled.reshape(tape.shape(x))?);
    Ok(tape.add(x, t)?)
}

/// Where the `1/sqrt(depth)` factor of attention is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `(1/sqrt(depth)) · softmax(t·sᵀ) · s`
    #[default]
    Outside,
    /// `softmax(t·sᵀ / sqrt(depth)) · s`
    Inside,
}

pub struct Attention {
    pub output: Var,
    /// Softmax weights `[.., n, m]`, one row per target position.
    pub weights: Var,
}

/// Inner-product attention of `target [.., n, c]` over `source [.., m, c]`.
/// `source_mask` has one flag per `(batch, source position)`; `false`
/// positions receive zero weight.
pub fn attend(
    tape: &mut Tape,
    source: Var,
    target: Var,
    source_mask: Option<&[bool]>,
    scale: AttentionScale,
) -> Result<Attention> {
    let (sd, td) = (tape.value(source).depth(), tape.value(target).depth());
    if sd != td {
        return Err(config_error(format!(
            "attention depth mismatch: source {sd}, target {td}"
        )));
    }
    let factor = 1.0 / (td as f64).sqrt();
    let source_t = tape.transpose(source)?;
    let mut logits = tape.matmul(target, source_t)?;
    if scale == AttentionScale::Inside {
        logits = tape.scale(logits, factor);
    }
    let weights = tape.softmax(logits, source_mask)?;
    let mut output = tape.matmul(weights, source)?;
    if scale == AttentionScale::Outside {
        output = tape.scale(output, factor);
    }
    Ok(Attention { output, weights })
}

/// Two convolution steps over `target + timing`, then attention over the
/// source.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModule<T> {
    pub first: ConvStep<T>,
    pub second: ConvStep<T>,
}

impl<T> AttentionModule<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttentionModule<U> {
        AttentionModule {
            first: self.first.map(&mut f),
            second: self.second.map(f),
        }
    }
}

/// Specs of the two attention steps on depth `c`.
pub fn attention_specs(c: usize, padding: Padding, modes: [ConvMode; 2]) -> [ConvSpec; 2] {
    let [(k1, d1), (k2, d2)] = ATTENTION_STEPS;
    [
        ConvSpec::new(k1, d1, modes[0], c, padding),
        ConvSpec::new(k2, d2, modes[1], c, padding),
    ]
}

impl AttentionModule<Tensor> {
    pub fn init(specs: [ConvSpec; 2], rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            first: ConvStep::init(specs[0], rng)?,
            second: ConvStep::init(specs[1], rng)?,
        })
    }

    pub fn zeros(specs: [ConvSpec; 2]) -> Result<Self> {
        Ok(Self {
            first: ConvStep::zeros(specs[0])?,
            second: ConvStep::zeros(specs[1])?,
        })
    }
}

pub fn attention_module(
    tape: &mut Tape,
    source: Var,
    target: Var,
    module: &AttentionModule<Var>,
    source_mask: Option<&[bool]>,
    scale: AttentionScale,
) -> Result<Var> {
    let timed = add_timing(tape, target)?;
    let h1 = conv_step(tape, timed, &module.first)?;
    let h2 = conv_step(tape, h1, &module.second)?;
    Ok(attend(tape, source, h2, source_mask, scale)?.output)
}
