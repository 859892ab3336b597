use std::fmt::Write;

use crate::convops::{
    allocated_params, coverage_profile, flops_per_position, param_count, probe_receptive_field,
    receptive_field, undilated_equivalent, ConvMode, ConvSpec, CoverageProfile,
};
use crate::error::Result;
use crate::model::{ConvLayerInfo, ModelConfig};

/// Kernel parameters of one step; grouped terms use the analytic formula
/// whenever input and output depth agree.
fn kernel_params(spec: &ConvSpec) -> Result<usize> {
    if spec.c_in == spec.c_out {
        Ok(param_count(spec)?)
    } else {
        Ok(allocated_params(spec)?)
    }
}

fn mode_label(mode: ConvMode) -> String {
    match mode {
        ConvMode::Full => "full".into(),
        ConvMode::Separable => "separable".into(),
        ConvMode::SubSeparable { groups } => format!("sub_separable(g={groups})"),
        ConvMode::SuperSeparable { groups } => format!("super_separable(g={groups})"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub layer: ConvLayerInfo,
    /// Kernel scalars owned by this step (0 when shared).
    pub kernel_params: usize,
    pub layer_norm_params: usize,
    pub flops_per_position: usize,
}

/// Parameter and cost breakdown of a model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Audit {
    pub depth: usize,
    pub rows: Vec<AuditRow>,
    pub embedding: usize,
    pub projection: usize,
}

impl Audit {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let rows = cfg
            .conv_layers()
            .into_iter()
            .map(|layer| {
                let own = kernel_params(&layer.spec)?;
                Ok(AuditRow {
                    kernel_params: if layer.shared_kernels { 0 } else { own },
                    layer_norm_params: 2,
                    flops_per_position: flops_per_position(&layer.spec)?,
                    layer,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            depth: cfg.depth,
            rows,
            embedding: (cfg.vocab_src + cfg.vocab_tgt) * cfg.depth,
            projection: if cfg.tie_projection {
                0
            } else {
                cfg.depth * cfg.vocab_tgt
            },
        })
    }

    pub fn conv_params(&self) -> usize {
        self.rows.iter().map(|r| r.kernel_params).sum()
    }

    pub fn layer_norm_params(&self) -> usize {
        self.rows.iter().map(|r| r.layer_norm_params).sum()
    }

    pub fn non_embedding(&self) -> usize {
        self.conv_params() + self.layer_norm_params() + self.projection
    }

    pub fn flops_per_position(&self) -> usize {
        self.rows.iter().map(|r| r.flops_per_position).sum()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<34} {:<22} {:>3} {:>3} {:>6} {:>6} {:>12} {:>12}",
            "layer", "mode", "k", "d", "c_in", "c_out", "params", "flops/pos"
        );
        for r in &self.rows {
            let spec = &r.layer.spec;
            let params = if r.layer.shared_kernels {
                format!("{} (shared)", r.layer_norm_params)
            } else {
                (r.kernel_params + r.layer_norm_params).to_string()
            };
            let _ = writeln!(
                s,
                "{:<34} {:<22} {:>3} {:>3} {:>6} {:>6} {:>12} {:>12}",
                r.layer.name,
                mode_label(spec.mode),
                spec.k,
                spec.dilation,
                spec.c_in,
                spec.c_out,
                params,
                r.flops_per_position
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "conv kernels              {:>14}", self.conv_params());
        let _ = writeln!(
            s,
            "layer norm                {:>14}",
            self.layer_norm_params()
        );
        let _ = writeln!(s, "output projection         {:>14}", self.projection);
        let _ = writeln!(s, "non-embedding parameters  {:>14}", self.non_embedding());
        let _ = writeln!(s, "embedding parameters      {:>14}", self.embedding);
        let _ = writeln!(
            s,
            "total parameters          {:>14}",
            self.non_embedding() + self.embedding
        );
        let _ = writeln!(
            s,
            "flops per position        {:>14}",
            self.flops_per_position()
        );
        s
    }
}

/// Per-layer cost of every mode at each distinct filter size of `cfg`.
pub fn mode_comparison(cfg: &ModelConfig) -> String {
    let c = cfg.depth;
    let mut ks: Vec<usize> = cfg.conv_layers().iter().map(|l| l.spec.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut modes = vec![ConvMode::Full, ConvMode::Separable];
    let mut groups = cfg.group_schedule();
    groups.extend([2, 3, 16]);
    groups.sort_unstable();
    groups.dedup();
    for g in groups.into_iter().filter(|&g| g > 1) {
        modes.push(ConvMode::SubSeparable { groups: g });
        modes.push(ConvMode::SuperSeparable { groups: g });
    }
    let mut s = String::new();
    let _ = writeln!(s, "per-layer parameters by mode at c={c}");
    let _ = write!(s, "{:<22}", "mode");
    for k in &ks {
        let _ = write!(s, " {:>12}", format!("k={k}"));
    }
    let _ = writeln!(s);
    for mode in modes {
        let _ = write!(s, "{:<22}", mode_label(mode));
        for &k in &ks {
            let spec = ConvSpec::new(k, 1, mode, c, crate::convops::Padding::Same);
            let cell = param_count(&spec).map_or("-".to_string(), |n| n.to_string());
            let _ = write!(s, " {cell:>12}");
        }
        let _ = writeln!(s);
    }
    s
}

/// Receptive field and coverage of a stack, and its undilated twin.
#[derive(Debug, Clone, PartialEq)]
pub struct StackAnalysis {
    pub stack: Vec<ConvSpec>,
    pub receptive_field: usize,
    pub probed: usize,
    pub profile: CoverageProfile,
    pub undilated: Vec<ConvSpec>,
    pub dilated_params: Option<usize>,
    pub undilated_params: Option<usize>,
}

impl StackAnalysis {
    pub fn new(stack: Vec<ConvSpec>) -> Result<Self> {
        let undilated = undilated_equivalent(&stack);
        let total =
            |s: &[ConvSpec]| -> Option<usize> { s.iter().map(|l| param_count(l).ok()).sum() };
        Ok(Self {
            receptive_field: receptive_field(&stack),
            probed: probe_receptive_field(&stack)?,
            profile: coverage_profile(&stack),
            dilated_params: total(&stack),
            undilated_params: total(&undilated),
            undilated,
            stack,
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:>4} {:>4} {:>6}  mode",
            "layer", "k", "d", "span"
        );
        for (i, l) in self.stack.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<6} {:>4} {:>4} {:>6}  {}",
                i + 1,
                l.k,
                l.dilation,
                l.span(),
                mode_label(l.mode)
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "receptive field {} (gradient probe {})",
            self.receptive_field, self.probed
        );
        let _ = writeln!(s, "coverage (offset: paths)");
        let peak = self
            .profile
            .counts
            .iter()
            .copied()
            .max()
            .unwrap_or(1)
            .max(1);
        for (&o, &n) in self.profile.offsets.iter().zip(&self.profile.counts) {
            let bar = "#".repeat((n * 40).div_ceil(peak) as usize);
            let _ = writeln!(s, "{o:>6}: {n:>8} {bar}");
        }
        let dead = self.profile.dead_zones();
        if dead.is_empty() {
            let _ = writeln!(s, "dead zones: none");
        } else {
            let list: Vec<String> = dead.iter().map(i64::to_string).collect();
            let _ = writeln!(s, "dead zones ({}): {}", dead.len(), list.join(" "));
        }
        let ks: Vec<String> = self.undilated.iter().map(|l| l.k.to_string()).collect();
        let _ = writeln!(
            s,
            "undilated alternative: filters {} at dilation 1, receptive field {}",
            ks.join("-"),
            receptive_field(&self.undilated)
        );
        let show = |n: Option<usize>| n.map_or("n/a".to_string(), |n| n.to_string());
        let _ = writeln!(
            s,
            "parameters: dilated {} vs undilated {}",
            show(self.dilated_params),
            show(self.undilated_params)
        );
        s
    }
}
