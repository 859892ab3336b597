use super::{ConvMode, ConvSpec, Result};
use crate::tensor::{Rng, Tensor};

/// The learnable pieces of one convolution, shaped by its [`ConvMode`].
///
/// Generic over the payload so the same layout serves for tensor values
/// ([`Kernels`]), tape handles, parameter-store ids and shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSet<T> {
    Full {
        weight: T,
    },
    Separable {
        depthwise: T,
        pointwise: T,
    },
    /// One full kernel per channel group, then a `c_out -> c_out` merge.
    SubSeparable {
        groups: Vec<T>,
        merge: T,
    },
    /// One depthwise/pointwise pair per channel group.
    SuperSeparable {
        depthwise: Vec<T>,
        pointwise: Vec<T>,
    },
}

pub type Kernels = KernelSet<Tensor>;

impl<T> KernelSet<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> KernelSet<U> {
        match self {
            KernelSet::Full { weight } => KernelSet::Full { weight: f(weight) },
            KernelSet::Separable {
                depthwise,
                pointwise,
            } => KernelSet::Separable {
                depthwise: f(depthwise),
                pointwise: f(pointwise),
            },
            KernelSet::SubSeparable { groups, merge } => KernelSet::SubSeparable {
                groups: groups.iter().map(&mut f).collect(),
                merge: f(merge),
            },
            KernelSet::SuperSeparable {
                depthwise,
                pointwise,
            } => KernelSet::SuperSeparable {
                depthwise: depthwise.iter().map(&mut f).collect(),
                pointwise: pointwise.iter().map(&mut f).collect(),
            },
        }
    }

    /// Entries with stable names, in storage order.
    pub fn named(&self) -> Vec<(String, &T)> {
        match self {
            KernelSet::Full { weight } => vec![("full".into(), weight)],
            KernelSet::Separable {
                depthwise,
                pointwise,
            } => vec![
                ("depthwise".into(), depthwise),
                ("pointwise".into(), pointwise),
            ],
            KernelSet::SubSeparable { groups, merge } => groups
                .iter()
                .enumerate()
                .map(|(i, g)| (format!("group{i}"), g))
                .chain(std::iter::once(("merge".to_string(), merge)))
                .collect(),
            KernelSet::SuperSeparable {
                depthwise,
                pointwise,
            } => depthwise
                .iter()
                .enumerate()
                .map(|(i, d)| (format!("depthwise{i}"), d))
                .chain(
                    pointwise
                        .iter()
                        .enumerate()
                        .map(|(i, p)| (format!("pointwise{i}"), p)),
                )
                .collect(),
        }
    }

    /// Build a set with the layout `spec` demands, filling each slot from
    /// `(name, shape, fan_in, fan_out)`.
    pub fn build(
        spec: &ConvSpec,
        mut f: impl FnMut(&str, &[usize], usize, usize) -> T,
    ) -> Result<Self> {
        spec.validate()?;
        let (k, ci, co) = (spec.k, spec.c_in, spec.c_out);
        Ok(match spec.mode {
            ConvMode::Full => KernelSet::Full {
                weight: f("full", &[k, ci, co], k * ci, k * co),
            },
            ConvMode::Separable => KernelSet::Separable {
                depthwise: f("depthwise", &[k, ci], k, k),
                pointwise: f("pointwise", &[ci, co], ci, co),
            },
            ConvMode::SubSeparable { groups: g } => {
                let (gi, go) = (ci / g, co / g);
                KernelSet::SubSeparable {
                    groups: (0..g)
                        .map(|i| f(&format!("group{i}"), &[k, gi, go], k * gi, k * go))
                        .collect(),
                    merge: f("merge", &[co, co], co, co),
                }
            }
            ConvMode::SuperSeparable { groups: g } => {
                let (gi, go) = (ci / g, co / g);
                let depthwise = (0..g)
                    .map(|i| f(&format!("depthwise{i}"), &[k, gi], k, k))
                    .collect();
                let pointwise = (0..g)
                    .map(|i| f(&format!("pointwise{i}"), &[gi, go], gi, go))
                    .collect();
                KernelSet::SuperSeparable {
                    depthwise,
                    pointwise,
                }
            }
        })
    }
}

impl Kernels {
    /// Glorot-uniform initialisation, `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init(spec: &ConvSpec, rng: &mut Rng) -> Result<Self> {
        Self::build(spec, |_, shape, fan_in, fan_out| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::uniform(shape, bound, rng)
        })
    }

    pub fn zeros(spec: &ConvSpec) -> Result<Self> {
        Self::build(spec, |_, shape, _, _| Tensor::zeros(shape))
    }

    pub fn filled(spec: &ConvSpec, value: f64) -> Result<Self> {
        Self::build(spec, |_, shape, _, _| Tensor::full(shape, value))
    }

    /// Number of learnable scalars actually held.
    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}
