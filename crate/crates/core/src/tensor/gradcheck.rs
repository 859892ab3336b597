//! Central finite-difference checks for tape gradients.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn compare_gradients(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of one tensor.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    out
}

fn eval_scalar<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(TensorError::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok(tape.value(out).item())
}

/// Gradient check over several inputs at once; returns the worst relative
/// error across all of them.
pub fn finite_difference_check_many<F>(f: F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut worst = 0.0f64;
    for (slot, (x, &v)) in xs.iter().zip(&vars).enumerate() {
        let analytic = tape
            .grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut inputs = xs.to_vec();
        let mut err = None;
        let numeric = numeric_gradient(
            |probe| {
                inputs[slot] = probe.clone();
                match eval_scalar(&f, &inputs) {
                    Ok(v) => v,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            x,
        );
        if let Some(e) = err {
            return Err(e);
        }
        worst = worst.max(compare_gradients(&analytic, &numeric));
    }
    Ok(worst)
}

/// Gradient check of a scalar tape function at `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(|t, vs| f(t, vs[0]), std::slice::from_ref(x))
}
