use super::{ConvError, ConvMode, ConvSpec, KernelSet, Result};
use crate::tensor::{Tape, Var};

fn check_input(tape: &Tape, y: Var, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    let depth = tape.value(y).depth();
    if depth != spec.c_in {
        return Err(ConvError::Config(format!(
            "input depth {depth} != c_in {}",
            spec.c_in
        )));
    }
    Ok(())
}

fn check_groups(spec: &ConvSpec, have: usize) -> Result<()> {
    let g = spec.mode.groups();
    if g != have {
        return Err(ConvError::Config(format!(
            "spec has {g} groups but {have} kernels were given"
        )));
    }
    Ok(())
}

/// Zero padding along the length axis so a convolution with `spec` keeps the
/// sequence length. `Causal` puts all `(k-1)·d` positions on the left.
pub fn pad(tape: &mut Tape, y: Var, spec: &ConvSpec) -> Result<Var> {
    let (left, right) = spec.padding_amounts();
    Ok(tape.pad_length(y, left, right)?)
}

/// Direct summation over taps and input channels, `w[k, c_in, c_out]`.
pub fn conv_full(tape: &mut Tape, w: Var, y: Var, spec: &ConvSpec) -> Result<Var> {
    check_input(tape, y, spec)?;
    let padded = pad(tape, y, spec)?;
    Ok(tape.conv1d(padded, w, spec.dilation)?)
}

/// Per-position channel projection, `w[c_in, c_out]`.
pub fn pointwise_conv(tape: &mut Tape, w: Var, y: Var) -> Result<Var> {
    let depth = tape.value(y).depth();
    let rows = tape.shape(w)[0];
    if tape.shape(w).len() != 2 || depth != rows {
        return Err(ConvError::Config(format!(
            "pointwise kernel {:?} does not accept input depth {depth}",
            tape.shape(w)
        )));
    }
    Ok(tape.matmul(y, w)?)
}

/// Each channel filtered independently, `w[k, c]`.
pub fn depthwise_conv(tape: &mut Tape, w: Var, y: Var, spec: &ConvSpec) -> Result<Var> {
    let depth = tape.value(y).depth();
    if tape.shape(w).len() != 2 || tape.shape(w)[1] != depth {
        return Err(ConvError::Config(format!(
            "depthwise kernel {:?} does not accept input depth {depth}",
            tape.shape(w)
        )));
    }
    let padded = pad(tape, y, spec)?;
    Ok(tape.depthwise(padded, w, spec.dilation)?)
}

/// `pointwise_conv(wp, depthwise_conv(wd, y))`; dilation applies to the
/// depthwise stage.
pub fn sep_conv(tape: &mut Tape, wp: Var, wd: Var, y: Var, spec: &ConvSpec) -> Result<Var> {
    let spatial = depthwise_conv(tape, wd, y, spec)?;
    pointwise_conv(tape, wp, spatial)
}

/// Grouped ("sub-separable") convolution: split depth into `g` segments,
/// full convolution per segment, concatenate, then a pointwise merge.
pub fn group_conv(
    tape: &mut Tape,
    groups: &[Var],
    merge: Var,
    y: Var,
    spec: &ConvSpec,
) -> Result<Var> {
    check_input(tape, y, spec)?;
    check_groups(spec, groups.len())?;
    let padded = pad(tape, y, spec)?;
    let parts = tape.split_depth(padded, groups.len())?;
    let mut outs = Vec::with_capacity(parts.len());
    for (&part, &w) in parts.iter().zip(groups) {
        outs.push(tape.conv1d(part, w, spec.dilation)?);
    }
    let joined = tape.concat(&outs)?;
    pointwise_conv(tape, merge, joined)
}

/// Super-separable convolution: split depth into `g` segments, an
/// independent separable convolution per segment, concatenate. No channel
/// crosses a group boundary.
pub fn super_sep_conv(
    tape: &mut Tape,
    pointwise: &[Var],
    depthwise: &[Var],
    y: Var,
    spec: &ConvSpec,
) -> Result<Var> {
    check_input(tape, y, spec)?;
    check_groups(spec, pointwise.len())?;
    check_groups(spec, depthwise.len())?;
    let padded = pad(tape, y, spec)?;
    let parts = tape.split_depth(padded, depthwise.len())?;
    let mut outs = Vec::with_capacity(parts.len());
    for ((&part, &wd), &wp) in parts.iter().zip(depthwise).zip(pointwise) {
        let spatial = tape.depthwise(part, wd, spec.dilation)?;
        outs.push(pointwise_conv(tape, wp, spatial)?);
    }
    Ok(tape.concat(&outs)?)
}

/// Dispatch on the spec's mode.
pub fn apply(tape: &mut Tape, spec: &ConvSpec, kernels: &KernelSet<Var>, y: Var) -> Result<Var> {
    match (spec.mode, kernels) {
        (ConvMode::Full, KernelSet::Full { weight }) => conv_full(tape, *weight, y, spec),
        (
            ConvMode::Separable,
            KernelSet::Separable {
                depthwise,
                pointwise,
            },
        ) => {
            check_input(tape, y, spec)?;
            sep_conv(tape, *pointwise, *depthwise, y, spec)
        }
        (ConvMode::SubSeparable { .. }, KernelSet::SubSeparable { groups, merge }) => {
            group_conv(tape, groups, *merge, y, spec)
        }
        (
            ConvMode::SuperSeparable { .. },
            KernelSet::SuperSeparable {
                depthwise,
                pointwise,
            },
        ) => super_sep_conv(tape, pointwise, depthwise, y, spec),
        _ => Err(ConvError::Config(format!(
            "kernel layout does not match mode {}",
            spec.mode.name()
        ))),
    }
}
