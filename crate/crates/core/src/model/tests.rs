use super::*;
use crate::convops::{allocated_params, param_count};
use crate::tensor::{finite_difference_check_many, TensorError};

fn toy(depth: usize, sep: Separability) -> ModelConfig {
    ModelConfig {
        depth,
        vocab_src: 9,
        vocab_tgt: 7,
        encoder_modules: 1,
        decoder_modules: 2,
        module_steps: vec![StepShape::new(3, 1), StepShape::new(3, 2)],
        residual_after: vec![2],
        separability: sep,
        ..ModelConfig::default()
    }
}

fn logits(net: &SliceNet, src: &TokenBatch, tgt: &TokenBatch) -> Tensor {
    let mut tape = Tape::new();
    let bind = net.store.bind(&mut tape, false);
    let out = net.forward(&mut tape, &bind, src, tgt, None).unwrap();
    tape.value(out).clone()
}

fn random_rows(rng: &mut Rng, rows: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..rows)
        .map(|_| (0..len).map(|_| rng.between(3, vocab - 1)).collect())
        .collect()
}

#[test]
fn shapes_and_vocabulary_errors() {
    let net = SliceNet::new(toy(6, Separability::Separable), 1).unwrap();
    let src = TokenBatch::from_rows(&[vec![3, 4, 5, 6], vec![7, 8, 3, 4]]).unwrap();
    let tgt = TokenBatch::from_rows(&[vec![3, 4, 2], vec![5, 2, 0]]).unwrap();
    let (enc, _) = net.encode_values(&src).unwrap();
    assert_eq!(enc.shape(), &[2, 4, 6]);
    assert_eq!(logits(&net, &src, &tgt).shape(), &[2, 3, 7]);

    let bad = TokenBatch::from_rows(&[vec![3, 9]]).unwrap();
    assert!(matches!(net.encode_values(&bad), Err(Error::Input(_))));
    let mut tape = Tape::new();
    let bind = net.store.bind(&mut tape, false);
    let one = TokenBatch::from_rows(&[vec![3, 4]]).unwrap();
    let bad_tgt = TokenBatch::from_rows(&[vec![7, 3]]).unwrap();
    assert!(matches!(
        net.forward(&mut tape, &bind, &one, &bad_tgt, None),
        Err(Error::Input(_))
    ));
}

#[test]
fn config_validation() {
    let mut cfg = toy(6, Separability::Separable);
    cfg.depth = 5;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = toy(8, Separability::SuperSeparable);
    assert!(cfg.validate().is_err(), "3 does not divide 8");
    cfg.groups = vec![2, 4];
    assert!(cfg.validate().is_ok());
    let mut cfg = toy(6, Separability::Separable);
    cfg.vocab_tgt = 3;
    assert!(cfg.validate().is_err());
    let json = r#"{"depth": 8, "bogus": 1}"#;
    assert!(serde_json::from_str::<ModelConfig>(json).is_err());
}

#[test]
fn encoder_sees_whole_source_and_ignores_padding() {
    let net = SliceNet::new(toy(6, Separability::Separable), 2).unwrap();
    let a = TokenBatch::from_rows(&[vec![3, 4, 5, 6, 7]]).unwrap();
    let b = TokenBatch::from_rows(&[vec![3, 4, 8, 6, 7]]).unwrap();
    let (ea, _) = net.encode_values(&a).unwrap();
    let (eb, _) = net.encode_values(&b).unwrap();
    // position 0 reaches three tokens to the right
    assert_ne!(&ea.data()[..6], &eb.data()[..6]);

    let short = TokenBatch::from_rows(&[vec![3, 4, 5]]).unwrap();
    let padded = TokenBatch::from_rows(&[vec![3, 4, 5], vec![3, 4, 5, 6, 7]]).unwrap();
    let (es, _) = net.encode_values(&short).unwrap();
    let (ep, _) = net.encode_values(&padded).unwrap();
    assert_eq!(es.data(), &ep.data()[..18]);
    assert!(ep.data()[..30][18..].iter().all(|&v| v == 0.0));

    let tgt = TokenBatch::from_rows(&[vec![5, 6, 2]]).unwrap();
    let both = TokenBatch::from_rows(&[vec![5, 6, 2], vec![5, 6, 2]]).unwrap();
    let alone = logits(&net, &short, &tgt);
    let batched = logits(&net, &padded, &both);
    assert!(alone
        .data()
        .iter()
        .zip(batched.data())
        .all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn decoder_is_autoregressive() {
    let mut rng = Rng::seed(3);
    for (i, sep) in [
        Separability::Separable,
        Separability::Full,
        Separability::SuperSeparable,
    ]
    .into_iter()
    .enumerate()
    {
        let net = SliceNet::new(toy(6, sep), 10 + i as u64).unwrap();
        let src = TokenBatch::from_rows(&random_rows(&mut rng, 1, 5, 9)).unwrap();
        let base_rows = random_rows(&mut rng, 1, 6, 7);
        let base = logits(&net, &src, &TokenBatch::from_rows(&base_rows).unwrap());
        for t in 0..6 {
            let mut rows = base_rows.clone();
            for s in t..6 {
                rows[0][s] = rng.between(2, 6);
            }
            let moved = logits(&net, &src, &TokenBatch::from_rows(&rows).unwrap());
            assert_eq!(&base.data()[..(t + 1) * 7], &moved.data()[..(t + 1) * 7]);
        }
    }
}

#[test]
fn incremental_matches_teacher_forced() {
    let net = SliceNet::new(toy(6, Separability::Separable), 4).unwrap();
    let src = TokenBatch::from_rows(&[vec![3, 5, 7, 4]]).unwrap();
    let (enc, _) = net.encode_values(&src).unwrap();
    let mut prefix = vec![START_ID];
    for _ in 0..5 {
        let lp = net.next_log_probs(&enc, &[prefix.clone()]).unwrap();
        let best = (0..7).fold(0, |b, j| if lp[0][j] > lp[0][b] { j } else { b });
        prefix.push(best);
    }
    let tgt = TokenBatch::from_rows(&[prefix[1..].to_vec()]).unwrap();
    let full = log_softmax(&logits(&net, &src, &tgt));
    for t in 0..5 {
        let inc = net.next_log_probs(&enc, &[prefix[..=t].to_vec()]).unwrap();
        for j in 0..7 {
            assert!((inc[0][j] - full.data()[t * 7 + j]).abs() < 1e-10);
        }
    }
}

/// Hand tally from the convolution cost formulas.
fn tally(cfg: &ModelConfig) -> (usize, usize) {
    let c = cfg.depth;
    let emb = (cfg.vocab_src + cfg.vocab_tgt) * c;
    let mut n = 0;
    let mut counter = 0;
    let mut conv = |k: usize, d: usize, padding, c_in: usize| {
        let spec = ConvSpec::new(k, d, cfg.mode_at(counter), c, padding).with_channels(c_in, c);
        counter += 1;
        2 + if c_in == c {
            param_count(&spec).unwrap()
        } else {
            allocated_params(&spec).unwrap()
        }
    };
    for _ in 0..cfg.encoder_modules {
        for s in &cfg.module_steps {
            n += conv(s.k, s.d, Padding::Same, c);
        }
    }
    let attention = |conv: &mut dyn FnMut(usize, usize, Padding, usize) -> usize| {
        cfg.attention_steps
            .iter()
            .map(|s| conv(s.k, s.d, Padding::Causal, c))
            .sum::<usize>()
    };
    n += attention(&mut conv);
    n += conv(cfg.mixer.k, cfg.mixer.d, Padding::Causal, 2 * c);
    for _ in 0..cfg.decoder_modules {
        for s in &cfg.module_steps {
            n += conv(s.k, s.d, Padding::Causal, c);
        }
        n += attention(&mut conv);
    }
    if !cfg.tie_projection {
        n += c * cfg.vocab_tgt;
    }
    (emb, n)
}

#[test]
fn parameter_counts_match_hand_tally() {
    for sep in [
        Separability::Full,
        Separability::Separable,
        Separability::SubSeparable,
        Separability::SuperSeparable,
    ] {
        for tie in [true, false] {
            let mut cfg = toy(12, sep);
            cfg.groups = if sep == Separability::SubSeparable {
                vec![4]
            } else {
                vec![]
            };
            cfg.tie_projection = tie;
            let net = SliceNet::new(cfg.clone(), 5).unwrap();
            assert_eq!(net.count_parameters(), tally(&cfg), "{sep:?} tie={tie}");
            assert_eq!(net.count_parameters().0, (9 + 7) * 12);
        }
    }
    let mut cfg = toy(8, Separability::Full);
    cfg.vocab_src = 16;
    cfg.vocab_tgt = 16;
    let full = SliceNet::new(cfg.clone(), 1).unwrap().count_parameters().1;
    cfg.separability = Separability::Separable;
    let sep = SliceNet::new(cfg, 1).unwrap().count_parameters().1;
    assert!(sep < full);
}

#[test]
fn super_separable_schedule_alternates() {
    let net = SliceNet::new(toy(6, Separability::SuperSeparable), 6).unwrap();
    let groups: Vec<usize> = net
        .conv_layers()
        .iter()
        .filter(|l| l.name.starts_with("decoder"))
        .map(|l| l.spec.mode.groups())
        .collect();
    assert!(groups.len() >= 4);
    for w in groups.windows(2) {
        assert!(matches!((w[0], w[1]), (2, 3) | (3, 2)));
    }
    for l in net.conv_layers() {
        let causal = !l.name.starts_with("encoder");
        assert_eq!(l.spec.padding == Padding::Causal, causal, "{}", l.name);
    }
}

#[test]
fn shared_attention_kernels() {
    let mut cfg = toy(6, Separability::Separable);
    let distinct = SliceNet::new(cfg.clone(), 7).unwrap();
    cfg.share_attention_kernels = true;
    let shared = SliceNet::new(cfg, 7).unwrap();
    let per_step = 5 * 6 + 36;
    // one mixer attention plus one per decoder module
    assert_eq!(
        distinct.count_parameters().1 - shared.count_parameters().1,
        3 * per_step
    );
    assert!(shared.store.id("mixer/attention/step2/depthwise").is_none());
    assert!(shared.store.id("mixer/attention/step2/ln_gain").is_some());
}

#[test]
fn step_zero_loss_near_uniform() {
    let mut cfg = toy(16, Separability::Separable);
    cfg.vocab_src = 16;
    cfg.vocab_tgt = 16;
    cfg.module_steps = ModelConfig::default().module_steps;
    let mut rng = Rng::seed(8);
    for seed in 0..3 {
        let net = SliceNet::new(cfg.clone(), seed).unwrap();
        let src = TokenBatch::from_rows(&random_rows(&mut rng, 4, 10, 16)).unwrap();
        let tgt = TokenBatch::from_rows(&random_rows(&mut rng, 4, 10, 16)).unwrap();
        let lp = log_softmax(&logits(&net, &src, &tgt));
        let nll = -(0..40).map(|r| lp.data()[r * 16 + tgt.ids[r]]).sum::<f64>() / 40.0;
        let uniform = 16f64.ln();
        assert!((nll - uniform).abs() < 0.2 * uniform, "seed {seed}: {nll}");
    }
}

#[test]
fn gradients_reach_both_decoder_branches() {
    let net = SliceNet::new(toy(6, Separability::Separable), 9).unwrap();
    let src = TokenBatch::from_rows(&[vec![3, 4, 5, 6]]).unwrap();
    let tgt = TokenBatch::from_rows(&[vec![4, 5, 2]]).unwrap();
    let mut tape = Tape::new();
    let bind = net.store.bind(&mut tape, true);
    let out = net.forward(&mut tape, &bind, &src, &tgt, None).unwrap();
    let loss = tape.cross_entropy(out, &tgt.ids, &[1.0; 3]).unwrap();
    tape.backward(loss).unwrap();
    for name in [
        "decoder/module2/conv/step1/pointwise",
        "decoder/module2/attention/step2/pointwise",
        "encoder/module1/step1/depthwise",
    ] {
        let id = net.store.id(name).unwrap();
        let g = tape.grad(bind.var(id)).unwrap();
        assert!(g.data().iter().any(|&v| v != 0.0), "{name}");
    }
}

#[test]
fn full_model_gradient_check() {
    let mut cfg = toy(4, Separability::Separable);
    cfg.vocab_src = 6;
    cfg.vocab_tgt = 6;
    for tie in [true, false] {
        cfg.tie_projection = tie;
        let net = SliceNet::new(cfg.clone(), 11).unwrap();
        let src = TokenBatch::from_rows(&[vec![3, 4, 5, 3, 4], vec![5, 4, 3, 0, 0]]).unwrap();
        let tgt = TokenBatch::from_rows(&[vec![4, 5, 3, 2], vec![3, 2, 0, 0]]).unwrap();
        let weights: Vec<f64> = tgt
            .mask()
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
        let xs: Vec<Tensor> = net.store.iter().map(|(_, _, p)| p.value.clone()).collect();
        let err = finite_difference_check_many(
            |tape, vars| {
                let bind = Binding::from_vars(vars.to_vec());
                let out = net.forward(tape, &bind, &src, &tgt, None).map_err(|e| {
                    TensorError::Invalid {
                        op: "model",
                        msg: e.to_string(),
                    }
                })?;
                tape.cross_entropy(out, &tgt.ids, &weights)
            },
            &xs,
        )
        .unwrap();
        assert!(err < 1e-3, "tie={tie}: {err}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let net = SliceNet::new(toy(6, Separability::SuperSeparable), 12).unwrap();
    let bytes = net.store.to_bytes();
    assert!(bytes.starts_with(b"SLICENET1\n"));
    let count = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    assert_eq!(count as usize, net.store.len());

    let mut other = SliceNet::new(toy(6, Separability::SuperSeparable), 99).unwrap();
    assert_ne!(other.store, net.store);
    other.store.load_bytes(&bytes).unwrap();
    assert_eq!(other.store, net.store);
    assert_eq!(other.store.to_bytes(), bytes);

    let mut wrong = SliceNet::new(toy(6, Separability::Separable), 1).unwrap();
    match wrong.store.load_bytes(&bytes) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("encoder/module1/step1"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(other.store.load_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(other.store.load_bytes(b"NOPE").is_err());
}

#[test]
fn checkpoint_layout_by_hand() {
    let mut store = ParamStore::new();
    store
        .insert("ab", Tensor::new(&[2], vec![1.5, -2.0]).unwrap(), false)
        .unwrap();
    let mut want = b"SLICENET1\n".to_vec();
    want.extend_from_slice(&2u32.to_le_bytes());
    want.extend_from_slice(b"ab");
    want.push(1);
    want.extend_from_slice(&2u32.to_le_bytes());
    want.extend_from_slice(&1.5f64.to_le_bytes());
    want.extend_from_slice(&(-2.0f64).to_le_bytes());
    want.extend_from_slice(&1u64.to_le_bytes());
    assert_eq!(store.to_bytes(), want);
    assert!(store.insert("ab", Tensor::scalar(0.0), false).is_err());
}
