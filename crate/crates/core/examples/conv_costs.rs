//! Parameter cost of each convolution mode, then a full model audit.
//!
//! cargo run --release --example conv_costs -- [depth]

use slicenet::cli::{mode_comparison, Audit};
use slicenet::convops::{param_count, ConvMode, ConvSpec, Padding};
use slicenet::model::{ModelConfig, Separability};

fn main() -> slicenet::Result<()> {
    let depth: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1024);

    println!("single c->c convolution, c = {depth}");
    println!(
        "{:>4}  {:>12}  {:>12}  {:>12}  {:>12}",
        "k", "full", "separable", "sub g=16", "super g=2"
    );
    for k in [3, 7, 15, 31] {
        let count = |mode| param_count(&ConvSpec::new(k, 1, mode, depth, Padding::Causal));
        println!(
            "{k:>4}  {:>12}  {:>12}  {:>12}  {:>12}",
            count(ConvMode::Full)?,
            count(ConvMode::Separable)?,
            count(ConvMode::SubSeparable { groups: 16 })?,
            count(ConvMode::SuperSeparable { groups: 2 })?,
        );
    }

    let cfg = ModelConfig {
        depth: 48,
        vocab_src: 1000,
        vocab_tgt: 1000,
        separability: Separability::SuperSeparable,
        ..ModelConfig::default()
    };
    println!();
    println!("{}", mode_comparison(&cfg));
    let audit = Audit::new(&cfg)?;
    println!("{}", audit.render());
    Ok(())
}
