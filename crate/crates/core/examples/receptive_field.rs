//! Receptive field, tap coverage and the undilated alternative for a few
//! filter/dilation stacks.
//!
//! cargo run --release --example receptive_field

use slicenet::cli::StackAnalysis;
use slicenet::convops::{ConvMode, ConvSpec, Padding};

fn main() -> slicenet::Result<()> {
    let stacks: [(&str, &[(usize, usize)]); 5] = [
        (
            "dilated 3-3-3-3 / 1-2-4-8",
            &[(3, 1), (3, 2), (3, 4), (3, 8)],
        ),
        ("mixed 3-7-7-7 / 1-1-2-4", &[(3, 1), (7, 1), (7, 2), (7, 4)]),
        (
            "mixed 3-7-15-15 / 1-1-1-2",
            &[(3, 1), (7, 1), (15, 1), (15, 2)],
        ),
        ("undilated 3-7-15-31", &[(3, 1), (7, 1), (15, 1), (31, 1)]),
        ("shared factor 3-3-3 / 2-4-8", &[(3, 2), (3, 4), (3, 8)]),
    ];
    for (name, layers) in stacks {
        let stack = layers
            .iter()
            .map(|&(k, d)| ConvSpec::new(k, d, ConvMode::Separable, 1024, Padding::Causal))
            .collect();
        println!("== {name}");
        println!("{}", StackAnalysis::new(stack)?.render());
    }
    Ok(())
}
