use serde::Deserialize;

use super::{ConvError, ConvMode, ConvSpec, KernelSet, Padding, Result};
use crate::tensor::{Tape, Tensor};

/// Learnable parameters of a `c -> c` convolution:
/// `k·c²`, `k·c + c²`, `k·c²/g + c²`, `k·c + c²/g`.
///
/// This is the analytic cost, so `g` need not divide `c` as long as every
/// term is a whole number (e.g. `k=3, c=1000, g=16`). Whenever the spec is
/// also allocatable the result equals [`allocated_params`].
pub fn param_count(spec: &ConvSpec) -> Result<usize> {
    let analytic = ConvSpec {
        mode: ConvMode::Full,
        ..*spec
    };
    analytic.validate()?;
    if spec.mode.groups() == 0 {
        return Err(ConvError::Config("group count must be >= 1".into()));
    }
    if spec.c_in != spec.c_out {
        return Err(ConvError::Unsupported(format!(
            "parameter formula covers c -> c convolutions, got {} -> {}",
            spec.c_in, spec.c_out
        )));
    }
    let (k, c, g) = (spec.k, spec.c_in, spec.mode.groups());
    let grouped = |n: usize| {
        if n.is_multiple_of(g) {
            Ok(n / g)
        } else {
            Err(ConvError::Config(format!(
                "{n} weights do not split into {g} groups"
            )))
        }
    };
    Ok(match spec.mode {
        ConvMode::Full => k * c * c,
        ConvMode::Separable => k * c + c * c,
        ConvMode::SubSeparable { .. } => grouped(k * c * c)? + c * c,
        ConvMode::SuperSeparable { .. } => k * c + grouped(c * c)?,
    })
}

/// Scalars in the kernel layout for `spec`, any channel counts.
pub fn allocated_params(spec: &ConvSpec) -> Result<usize> {
    let shapes = KernelSet::build(spec, |_, shape, _, _| shape.iter().product::<usize>())?;
    Ok(shapes.named().into_iter().map(|(_, n)| *n).sum())
}

/// Approximate multiply-adds per output position. Every kernel weight is
/// used exactly once per position, so this equals the parameter count.
pub fn flops_per_position(spec: &ConvSpec) -> Result<usize> {
    allocated_params(spec)
}

/// `1 + Σ (k-1)·d` over the stack; 1 for an empty stack.
pub fn receptive_field(stack: &[ConvSpec]) -> usize {
    1 + stack.iter().map(ConvSpec::span).sum::<usize>()
}

/// How many distinct tap paths connect each input offset to one output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageProfile {
    /// Input offset relative to the output position, ascending.
    pub offsets: Vec<i64>,
    pub counts: Vec<u64>,
}

impl CoverageProfile {
    pub fn receptive_field(&self) -> usize {
        self.offsets.len()
    }

    /// Offsets inside the receptive field that no path reaches.
    pub fn dead_zones(&self) -> Vec<i64> {
        self.offsets
            .iter()
            .zip(&self.counts)
            .filter(|(_, &c)| c == 0)
            .map(|(&o, _)| o)
            .collect()
    }

    pub fn count_at(&self, offset: i64) -> u64 {
        let first = self.offsets[0];
        let i = offset - first;
        if i < 0 || i as usize >= self.counts.len() {
            0
        } else {
            self.counts[i as usize]
        }
    }
}

/// Path-count histogram, by composing the tap sets of every layer.
pub fn coverage_profile(stack: &[ConvSpec]) -> CoverageProfile {
    let mut first: i64 = 0;
    let mut counts: Vec<u64> = vec![1];
    for spec in stack {
        let (left, _) = spec.padding_amounts();
        let mut next = vec![0u64; counts.len() + spec.span()];
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            for j in 0..spec.k {
                next[i + j * spec.dilation] += c;
            }
        }
        counts = next;
        first -= left as i64;
    }
    let offsets = (0..counts.len() as i64).map(|i| first + i).collect();
    CoverageProfile { offsets, counts }
}

/// Receptive field measured by autodiff: run the stack (single channel,
/// all-ones kernels) on a long input and count the span of inputs with a
/// nonzero gradient at one output position.
pub fn probe_receptive_field(stack: &[ConvSpec]) -> Result<usize> {
    let rf = receptive_field(stack);
    let n = 2 * rf + 1;
    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones(&[1, n, 1]));
    let mut h = x;
    for spec in stack {
        let probe = ConvSpec {
            mode: ConvMode::Full,
            c_in: 1,
            c_out: 1,
            ..*spec
        };
        let w = tape.constant(Tensor::ones(&[spec.k, 1, 1]));
        h = super::conv_full(&mut tape, w, h, &probe)?;
    }
    let causal = stack.iter().any(|s| s.padding == Padding::Causal);
    let pos = if causal { n - 1 } else { rf };
    let mut select = vec![0.0; n];
    select[pos] = 1.0;
    let picked = tape.mul_const(h, select)?;
    let loss = tape.sum(picked);
    tape.backward(loss)?;
    let grad = tape.grad(x).expect("input gradient").data().to_vec();
    let nonzero: Vec<usize> = (0..n).filter(|&i| grad[i] != 0.0).collect();
    Ok(match (nonzero.first(), nonzero.last()) {
        (Some(lo), Some(hi)) => hi - lo + 1,
        _ => 0,
    })
}

/// Same receptive field without dilation: each layer's span `(k-1)·d` is
/// covered by a window of `(k-1)·d + 1` taps.
pub fn undilated_equivalent(stack: &[ConvSpec]) -> Vec<ConvSpec> {
    stack
        .iter()
        .map(|s| ConvSpec {
            k: s.span() + 1,
            dilation: 1,
            ..*s
        })
        .collect()
}

/// One layer of a JSON stack description, e.g.
/// `{"k": 3, "d": 2, "mode": "super_separable", "g": 2, "c": 1000}`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackLayer {
    pub k: usize,
    pub d: usize,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub g: Option<usize>,
    #[serde(default)]
    pub c: Option<usize>,
    #[serde(default)]
    pub padding: Option<String>,
}

/// Channels assumed when a stack layer omits `c`.
pub const DEFAULT_ANALYSIS_CHANNELS: usize = 1000;

impl StackLayer {
    pub fn to_spec(&self) -> Result<ConvSpec> {
        let g = self.g.unwrap_or(1);
        let mode = match self.mode.as_deref().unwrap_or("separable") {
            "full" | "none" => ConvMode::Full,
            "separable" => ConvMode::Separable,
            "sub_separable" | "grouped" => ConvMode::SubSeparable { groups: g },
            "super_separable" => ConvMode::SuperSeparable { groups: g },
            other => return Err(ConvError::Config(format!("unknown mode {other:?}"))),
        };
        let padding = match self.padding.as_deref().unwrap_or("same") {
            "same" => Padding::Same,
            "causal" => Padding::Causal,
            other => return Err(ConvError::Config(format!("unknown padding {other:?}"))),
        };
        let spec = ConvSpec::new(
            self.k,
            self.d,
            mode,
            self.c.unwrap_or(DEFAULT_ANALYSIS_CHANNELS),
            padding,
        );
        spec.validate()?;
        Ok(spec)
    }
}

/// Parse a JSON array of stack layers.
pub fn parse_stack(json: &str) -> Result<Vec<ConvSpec>> {
    let layers: Vec<StackLayer> =
        serde_json::from_str(json).map_err(|e| ConvError::Config(format!("stack JSON: {e}")))?;
    layers.iter().map(StackLayer::to_spec).collect()
}
