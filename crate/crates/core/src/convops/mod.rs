//! One-dimensional convolutions over `[batch, length, depth]` tensors.
//!
//! Four separability modes share one [`ConvSpec`]:
//!
//! | mode              | kernels                                   | parameters        |
//! |-------------------|-------------------------------------------|-------------------|
//! | `Full`            | `W[k, c_in, c_out]`                       | `k·c²`            |
//! | `Separable`       | depthwise `[k, c_in]`, pointwise `[c_in, c_out]` | `k·c + c²` |
//! | `SubSeparable(g)` | `g` full kernels on channel groups, then a `c→c` merge | `k·c²/g + c²` |
//! | `SuperSeparable(g)` | `g` independent separable convolutions  | `k·c + c²/g`      |
//!
//! Stride is always 1. Padding is zero padding, either centred (`Same`) or
//! entirely on the left (`Causal`), so output length equals input length.

mod analysis;
mod kernels;
mod ops;

pub use analysis::{
    allocated_params, coverage_profile, flops_per_position, param_count, parse_stack,
    probe_receptive_field, receptive_field, undilated_equivalent, CoverageProfile, StackLayer,
};
pub use kernels::{KernelSet, Kernels};
pub use ops::{
    apply, conv_full, depthwise_conv, group_conv, pad, pointwise_conv, sep_conv, super_sep_conv,
};

use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvError {
    #[error("invalid convolution spec: {0}")]
    Config(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ConvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvMode {
    Full,
    Separable,
    SubSeparable { groups: usize },
    SuperSeparable { groups: usize },
}

impl ConvMode {
    pub fn groups(self) -> usize {
        match self {
            ConvMode::Full | ConvMode::Separable => 1,
            ConvMode::SubSeparable { groups } | ConvMode::SuperSeparable { groups } => groups,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConvMode::Full => "full",
            ConvMode::Separable => "separable",
            ConvMode::SubSeparable { .. } => "sub_separable",
            ConvMode::SuperSeparable { .. } => "super_separable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Same,
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub k: usize,
    pub dilation: usize,
    pub mode: ConvMode,
    pub c_in: usize,
    pub c_out: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(k: usize, dilation: usize, mode: ConvMode, c: usize, padding: Padding) -> Self {
        Self {
            k,
            dilation,
            mode,
            c_in: c,
            c_out: c,
            padding,
        }
    }

    pub fn with_channels(mut self, c_in: usize, c_out: usize) -> Self {
        self.c_in = c_in;
        self.c_out = c_out;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(ConvError::Config("filter size k must be >= 1".into()));
        }
        if self.dilation == 0 {
            return Err(ConvError::Config("dilation must be >= 1".into()));
        }
        if self.c_in == 0 || self.c_out == 0 {
            return Err(ConvError::Config("channel counts must be >= 1".into()));
        }
        let g = self.mode.groups();
        if g == 0 {
            return Err(ConvError::Config("group count must be >= 1".into()));
        }
        if !self.c_in.is_multiple_of(g) || !self.c_out.is_multiple_of(g) {
            return Err(ConvError::Config(format!(
                "{g} groups must divide both c_in={} and c_out={}",
                self.c_in, self.c_out
            )));
        }
        Ok(())
    }

    /// Total zero padding along the length axis, `(k-1)·d`.
    pub fn span(&self) -> usize {
        (self.k - 1) * self.dilation
    }

    /// `(left, right)` padding amounts.
    pub fn padding_amounts(&self) -> (usize, usize) {
        let total = self.span();
        match self.padding {
            Padding::Causal => (total, 0),
            Padding::Same => (total / 2, total - total / 2),
        }
    }
}

#[cfg(test)]
mod tests;
