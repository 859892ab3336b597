//! Finite-difference check of tape gradients through every convolution mode.
//!
//! cargo run --release --example gradcheck

use slicenet::convops::{self, ConvMode, ConvSpec, Kernels, Padding};
use slicenet::tensor::finite_difference_check_many;
use slicenet::{Rng, Tensor, TensorError};

fn main() -> slicenet::Result<()> {
    let mut rng = Rng::seed(1);
    for mode in [
        ConvMode::Full,
        ConvMode::Separable,
        ConvMode::SubSeparable { groups: 2 },
        ConvMode::SuperSeparable { groups: 3 },
    ] {
        let spec = ConvSpec::new(3, 2, mode, 6, Padding::Causal);
        let kernels = Kernels::init(&spec, &mut rng)?;
        let mut inputs = vec![Tensor::uniform(&[2, 7, 6], 1.0, &mut rng)];
        inputs.extend(kernels.named().into_iter().map(|(_, t)| t.clone()));
        let weights = Tensor::uniform(&[2, 7, 6], 1.0, &mut rng).into_data();
        let err = finite_difference_check_many(
            |tape, vars| {
                let mut rest = vars[1..].iter();
                let bound = kernels.map(|_| *rest.next().expect("one var per kernel"));
                let y = convops::apply(tape, &spec, &bound, vars[0]).map_err(|e| {
                    TensorError::Invalid {
                        op: "conv",
                        msg: e.to_string(),
                    }
                })?;
                let y = tape.mul_const(y, weights.clone())?;
                Ok(tape.sum(y))
            },
            &inputs,
        )?;
        println!(
            "{:<16} {} inputs, worst relative error {err:.2e}",
            mode.name(),
            inputs.len()
        );
    }
    Ok(())
}
