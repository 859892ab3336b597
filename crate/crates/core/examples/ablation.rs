//! Toy-translate comparison of full, separable and super-separable models
//! at one non-embedding parameter budget.
//!
//! cargo run --release --example ablation -- [steps] [seeds]

use slicenet::model::{ModelConfig, Separability, SliceNet, StepShape};
use slicenet::training::{train_loop, SynthData, SynthTask, TaskKind, TrainConfig};

fn non_embedding(cfg: &ModelConfig) -> slicenet::Result<usize> {
    Ok(SliceNet::new(cfg.clone(), 0)?.count_parameters().1)
}

/// Even depth whose non-embedding count is closest to `target`.
fn match_budget(cfg: &ModelConfig, target: usize) -> slicenet::Result<ModelConfig> {
    let mut best: Option<(usize, ModelConfig)> = None;
    for depth in (2..=512).step_by(2) {
        let c = ModelConfig {
            depth,
            ..cfg.clone()
        };
        if c.validate().is_err() {
            continue;
        }
        let gap = non_embedding(&c)?.abs_diff(target);
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, c));
        }
    }
    Ok(best.expect("some depth validates").1)
}

fn main() -> slicenet::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let base = ModelConfig {
        vocab_src: 16,
        vocab_tgt: 16,
        encoder_modules: 1,
        decoder_modules: 1,
        module_steps: [(3, 1), (3, 1), (5, 1), (5, 1)]
            .iter()
            .map(|&(k, d)| StepShape::new(k, d))
            .collect(),
        residual_after: vec![2, 4],
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let full = ModelConfig {
        depth: 32,
        separability: Separability::Full,
        ..base.clone()
    };
    let budget = non_embedding(&full)?;
    let sep = match_budget(
        &ModelConfig {
            separability: Separability::Separable,
            ..base.clone()
        },
        budget,
    )?;
    let sup = match_budget(
        &ModelConfig {
            separability: Separability::SuperSeparable,
            groups: vec![2, 3],
            ..base.clone()
        },
        budget,
    )?;
    for (name, cfg) in [("full", full), ("separable", sep), ("super 2/3", sup)] {
        for seed in 1..=seeds {
            let task = SynthTask::new(TaskKind::ToyTranslate, 16, 1, 10, 0)?;
            let mut data = SynthData::new(task, seed, 8, 32)?;
            let mut model = SliceNet::new(cfg.clone(), seed)?;
            let mut train = TrainConfig {
                steps,
                seed,
                dropout: false,
                eval_every: steps,
                ..TrainConfig::default()
            };
            train.optimizer.learning_rate = 3e-3;
            let report = train_loop(&mut model, &mut data, &train, None, |_| {})?;
            let last = report.final_eval().expect("final evaluation");
            println!(
                "{name:<10} depth {:>3}  {:>6} params  seed {seed}  eval loss {:.4}  accuracy {:.4}",
                cfg.depth,
                non_embedding(&cfg)?,
                -last.neg_log_ppl,
                last.accuracy
            );
        }
    }
    Ok(())
}
