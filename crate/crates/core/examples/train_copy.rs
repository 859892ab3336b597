//! Train a small model on the copy task and report held-out accuracy.
//!
//! cargo run --release --example train_copy -- [seed] [steps]

use slicenet::model::{ModelConfig, SliceNet};
use slicenet::training::{train_loop, SynthData, SynthTask, TaskKind, TrainConfig};

fn main() -> slicenet::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5000);

    let model_cfg = ModelConfig {
        depth: 64,
        vocab_src: 16,
        vocab_tgt: 16,
        encoder_modules: 2,
        decoder_modules: 2,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        steps,
        seed,
        dropout: false,
        stop_accuracy: Some(0.995),
        ..TrainConfig::default()
    };
    let task = SynthTask::new(TaskKind::Copy, 16, 1, 20, 0)?;
    let mut data = SynthData::new(task, seed, train_cfg.eval_batches, train_cfg.batch_size)?;
    let mut model = SliceNet::new(model_cfg, seed)?;
    let start = std::time::Instant::now();
    let report = train_loop(&mut model, &mut data, &train_cfg, None, |r| {
        println!(
            "step {:>5}  loss {:.4}  neg_log_ppl {:.4}  accuracy {:.4}  ({:.0?})",
            r.step,
            r.loss,
            r.neg_log_ppl,
            r.accuracy,
            start.elapsed()
        );
    })?;
    let last = report.final_eval().expect("at least one evaluation");
    println!(
        "final accuracy {:.4} after {} steps",
        last.accuracy, last.step
    );
    Ok(())
}
