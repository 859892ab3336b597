//! Train a small reversal model, then compare greedy and beam decoding.
//!
//! cargo run --release --example beam_decode -- [steps]

use slicenet::decoding::{beam_search, decode_all, greedy_decode, score_sequence, DecodeConfig};
use slicenet::model::{ModelConfig, SliceNet, StepShape};
use slicenet::training::{train_loop, SynthData, SynthTask, TaskKind, TrainConfig};

fn main() -> slicenet::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1500);
    let vocab = 12;
    let cfg = ModelConfig {
        depth: 32,
        vocab_src: vocab,
        vocab_tgt: vocab,
        encoder_modules: 1,
        decoder_modules: 1,
        module_steps: vec![StepShape::new(3, 1), StepShape::new(5, 1)],
        residual_after: vec![2],
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let task = SynthTask::new(TaskKind::Reverse, vocab, 1, 8, 0)?;
    let mut data = SynthData::new(task.clone(), 7, 4, 16)?;
    let mut model = SliceNet::new(cfg, 7)?;
    let train = TrainConfig {
        steps,
        seed: 7,
        dropout: false,
        eval_every: 500,
        ..TrainConfig::default()
    };
    let report = train_loop(&mut model, &mut data, &train, None, |r| {
        println!("step {:>5}  accuracy {:.3}", r.step, r.accuracy);
    })?;
    println!(
        "trained to accuracy {:.3}\n",
        report.final_eval().map_or(0.0, |r| r.accuracy)
    );

    let beam = DecodeConfig::default();
    let sources: Vec<Vec<usize>> =
        vec![vec![3, 4, 5], vec![11, 10, 9, 8, 7], vec![5, 5, 6, 7, 3, 4]];
    for src in &sources {
        let greedy = greedy_decode(&model, src, None)?;
        let best = beam_search(&model, src, &beam)?;
        let mut want = task.target_for(src);
        want.retain(|&t| t != 0);
        println!("source {src:?}, expected {want:?}");
        println!("  greedy {:?} log p {:.4}", greedy.tokens, greedy.log_prob);
        println!(
            "  beam {} {:?} log p {:.4} score {:.4} (rescored {:.4})",
            beam.beam_size,
            best.tokens,
            best.log_prob,
            best.score(beam.alpha),
            score_sequence(&model, src, &best.tokens)?
        );
    }

    let batch = decode_all(&model, &sources, &beam);
    println!(
        "\nparallel decode of {} sources in input order:",
        batch.len()
    );
    for hyp in batch {
        println!("  {:?}", hyp?.tokens);
    }
    Ok(())
}
