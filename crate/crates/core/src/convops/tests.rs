use super::*;
use crate::tensor::{finite_difference_check, Rng, Tape, Tensor, Var};

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Independent reference: textbook quadruple loop with explicit zero
/// padding by index test.
fn naive_conv(x: &Tensor, w: &Tensor, dilation: usize, left: usize) -> Tensor {
    let (b, n, ci) = x.dims3();
    let (k, co) = (w.shape()[0], w.shape()[2]);
    let mut out = Tensor::zeros(&[b, n, co]);
    for bi in 0..b {
        for i in 0..n {
            for o in 0..co {
                let mut acc = 0.0;
                for j in 0..k {
                    let src = (i + j * dilation) as i64 - left as i64;
                    if src < 0 || src >= n as i64 {
                        continue;
                    }
                    for m in 0..ci {
                        acc += w.get(&[j, m, o]) * x.get(&[bi, src as usize, m]);
                    }
                }
                out.data_mut()[(bi * n + i) * co + o] = acc;
            }
        }
    }
    out
}

fn eval1(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv).unwrap();
    tape.value(out).clone()
}

fn spec(k: usize, d: usize, mode: ConvMode, c: usize, padding: Padding) -> ConvSpec {
    ConvSpec::new(k, d, mode, c, padding)
}

/// Full kernel equivalent to a separable pair: `W[j,m,n] = Wd[j,m]·Wp[m,n]`.
fn factored_full(wd: &Tensor, wp: &Tensor) -> Tensor {
    let (k, ci) = (wd.shape()[0], wd.shape()[1]);
    let co = wp.shape()[1];
    Tensor::from_fn(&[k, ci, co], |idx| {
        let (j, m, n) = (idx / (ci * co), (idx / co) % ci, idx % co);
        wd.get(&[j, m]) * wp.get(&[m, n])
    })
}

/// Block-diagonal full kernel from per-group kernels `[k, c/g, c_out/g]`.
fn block_diagonal(groups: &[Tensor], ci: usize, co: usize) -> Tensor {
    let g = groups.len();
    let (gi, go) = (ci / g, co / g);
    let k = groups[0].shape()[0];
    let mut w = Tensor::zeros(&[k, ci, co]);
    for (gix, gw) in groups.iter().enumerate() {
        for j in 0..k {
            for m in 0..gi {
                for n in 0..go {
                    w.data_mut()[(j * ci + gix * gi + m) * co + gix * go + n] = gw.get(&[j, m, n]);
                }
            }
        }
    }
    w
}

#[test]
fn conv_full_identity_kernel() {
    let mut rng = Rng::seed(1);
    let x = random(&[2, 6, 3], &mut rng);
    let s = spec(1, 1, ConvMode::Full, 3, Padding::Same);
    let w = Tensor::eye(3).reshape(&[1, 3, 3]).unwrap();
    let out = eval1(&x, |t, xv| {
        let wv = t.constant(w.clone());
        conv_full(t, wv, xv, &s)
    });
    assert_eq!(out, x);
}

#[test]
fn conv_full_hand_summation() {
    let x = Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let s = spec(3, 1, ConvMode::Full, 1, Padding::Same);
    let out = eval1(&x, |t, xv| {
        let wv = t.constant(Tensor::ones(&[3, 1, 1]));
        conv_full(t, wv, xv, &s)
    });
    assert_eq!(out.data(), &[3.0, 6.0, 5.0]);
}

#[test]
fn conv_full_matches_naive_oracle() {
    let mut rng = Rng::seed(2);
    for (k, d, padding) in [
        (3, 1, Padding::Same),
        (4, 2, Padding::Causal),
        (5, 3, Padding::Same),
    ] {
        let x = random(&[2, 9, 5], &mut rng);
        let w = random(&[k, 5, 7], &mut rng);
        let s = spec(k, d, ConvMode::Full, 5, padding).with_channels(5, 7);
        let out = eval1(&x, |t, xv| {
            let wv = t.constant(w.clone());
            conv_full(t, wv, xv, &s)
        });
        let want = naive_conv(&x, &w, d, s.padding_amounts().0);
        assert!(out.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv_full_channel_mismatch() {
    let x = Tensor::zeros(&[1, 4, 3]);
    let s = spec(3, 1, ConvMode::Full, 2, Padding::Same);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv = tape.constant(Tensor::zeros(&[3, 2, 2]));
    assert!(matches!(
        conv_full(&mut tape, wv, xv, &s),
        Err(ConvError::Config(_))
    ));
}

#[test]
fn pointwise_examples() {
    let mut rng = Rng::seed(3);
    let x = random(&[2, 5, 4], &mut rng);
    let out = eval1(&x, |t, xv| {
        let wv = t.constant(Tensor::eye(4));
        pointwise_conv(t, wv, xv)
    });
    assert_eq!(out, x);

    let w = random(&[4, 6], &mut rng);
    let out = eval1(&x, |t, xv| {
        let wv = t.constant(w.clone());
        pointwise_conv(t, wv, xv)
    });
    let s = spec(1, 1, ConvMode::Full, 4, Padding::Same).with_channels(4, 6);
    let full = eval1(&x, |t, xv| {
        let wv = t.constant(w.reshape(&[1, 4, 6]).unwrap());
        conv_full(t, wv, xv, &s)
    });
    assert!(out.max_abs_diff(&full) < 1e-12);

    let sums = eval1(&x, |t, xv| {
        let wv = t.constant(Tensor::ones(&[4, 1]));
        pointwise_conv(t, wv, xv)
    });
    for r in 0..10 {
        let want: f64 = x.data()[r * 4..(r + 1) * 4].iter().sum();
        assert!((sums.data()[r] - want).abs() < 1e-15);
    }

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv = tape.constant(Tensor::zeros(&[3, 3]));
    assert!(pointwise_conv(&mut tape, wv, xv).is_err());
}

#[test]
fn depthwise_examples() {
    let mut rng = Rng::seed(4);
    let x = random(&[2, 7, 3], &mut rng);
    let s1 = spec(1, 1, ConvMode::Separable, 3, Padding::Same);
    let out = eval1(&x, |t, xv| {
        let wv = t.constant(Tensor::ones(&[1, 3]));
        depthwise_conv(t, wv, xv, &s1)
    });
    assert_eq!(out, x);

    // Diagonal full kernel oracle.
    let s = spec(3, 2, ConvMode::Separable, 3, Padding::Causal);
    let wd = random(&[3, 3], &mut rng);
    let out = eval1(&x, |t, xv| {
        let wv = t.constant(wd.clone());
        depthwise_conv(t, wv, xv, &s)
    });
    let diag = Tensor::from_fn(&[3, 3, 3], |idx| {
        let (j, m, n) = (idx / 9, (idx / 3) % 3, idx % 3);
        if m == n {
            wd.get(&[j, m])
        } else {
            0.0
        }
    });
    let want = naive_conv(&x, &diag, 2, 4);
    assert!(out.max_abs_diff(&want) < 1e-12);

    let err = finite_difference_check(
        |t, xv| {
            let wv = t.constant(wd.clone());
            let y = depthwise_conv(t, wv, xv, &s).map_err(unwrap_tensor)?;
            Ok(t.sum(y))
        },
        &x,
    )
    .unwrap();
    assert!(err < 1e-4);
}

fn unwrap_tensor(e: ConvError) -> crate::tensor::TensorError {
    match e {
        ConvError::Tensor(t) => t,
        other => crate::tensor::TensorError::Invalid {
            op: "conv",
            msg: other.to_string(),
        },
    }
}

#[test]
fn sep_conv_examples() {
    let mut rng = Rng::seed(5);
    let x = random(&[2, 8, 4], &mut rng);
    let wp = random(&[4, 5], &mut rng);

    let s1 = spec(1, 1, ConvMode::Separable, 4, Padding::Same).with_channels(4, 5);
    let sep = eval1(&x, |t, xv| {
        let (p, d) = (t.constant(wp.clone()), t.constant(Tensor::ones(&[1, 4])));
        sep_conv(t, p, d, xv, &s1)
    });
    let pw = eval1(&x, |t, xv| {
        let p = t.constant(wp.clone());
        pointwise_conv(t, p, xv)
    });
    assert_eq!(sep, pw);

    let s = spec(3, 2, ConvMode::Separable, 4, Padding::Same).with_channels(4, 5);
    let wd = random(&[3, 4], &mut rng);
    let sep = eval1(&x, |t, xv| {
        let (p, d) = (t.constant(wp.clone()), t.constant(wd.clone()));
        sep_conv(t, p, d, xv, &s)
    });
    let composed = eval1(&x, |t, xv| {
        let (p, d) = (t.constant(wp.clone()), t.constant(wd.clone()));
        let dw = depthwise_conv(t, d, xv, &s)?;
        pointwise_conv(t, p, dw)
    });
    assert_eq!(sep.data(), composed.data());

    let full = naive_conv(&x, &factored_full(&wd, &wp), 2, s.padding_amounts().0);
    assert!(sep.max_abs_diff(&full) < 1e-12);
}

#[test]
fn group_conv_examples() {
    let mut rng = Rng::seed(6);
    let x = random(&[2, 7, 4], &mut rng);

    // g=1 with identity merge reduces to conv_full.
    let s = spec(3, 1, ConvMode::SubSeparable { groups: 1 }, 4, Padding::Same);
    let w = random(&[3, 4, 4], &mut rng);
    let out = eval1(&x, |t, xv| {
        let (g, m) = (t.constant(w.clone()), t.constant(Tensor::eye(4)));
        group_conv(t, &[g], m, xv, &s)
    });
    assert!(out.max_abs_diff(&naive_conv(&x, &w, 1, 1)) < 1e-12);

    // g=c, k=1: per-channel scaling, then merge.
    let s = spec(1, 1, ConvMode::SubSeparable { groups: 4 }, 4, Padding::Same);
    let scales = [2.0, -1.0, 0.5, 3.0];
    let merge = random(&[4, 4], &mut rng);
    let out = eval1(&x, |t, xv| {
        let gs: Vec<Var> = scales
            .iter()
            .map(|&v| t.constant(Tensor::full(&[1, 1, 1], v)))
            .collect();
        let m = t.constant(merge.clone());
        group_conv(t, &gs, m, xv, &s)
    });
    let scaled = Tensor::from_fn(x.shape(), |i| x.data()[i] * scales[i % 4]);
    let want = eval1(&scaled, |t, xv| {
        let m = t.constant(merge.clone());
        pointwise_conv(t, m, xv)
    });
    assert!(out.max_abs_diff(&want) < 1e-12);

    // g=2 on depth 4: block-diagonal full kernel, then pointwise merge.
    let s = spec(
        3,
        2,
        ConvMode::SubSeparable { groups: 2 },
        4,
        Padding::Causal,
    );
    let groups = [random(&[3, 2, 2], &mut rng), random(&[3, 2, 2], &mut rng)];
    let out = eval1(&x, |t, xv| {
        let gs: Vec<Var> = groups.iter().map(|g| t.constant(g.clone())).collect();
        let m = t.constant(merge.clone());
        group_conv(t, &gs, m, xv, &s)
    });
    let block = naive_conv(&x, &block_diagonal(&groups, 4, 4), 2, 4);
    let want = eval1(&block, |t, xv| {
        let m = t.constant(merge.clone());
        pointwise_conv(t, m, xv)
    });
    assert!(out.max_abs_diff(&want) < 1e-12);
}

#[test]
fn group_conv_rejects_indivisible_depth() {
    let s = spec(3, 1, ConvMode::SubSeparable { groups: 3 }, 4, Padding::Same);
    assert!(matches!(s.validate(), Err(ConvError::Config(_))));
    assert!(Kernels::zeros(&s).is_err());
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 5, 4]));
    let m = tape.constant(Tensor::eye(4));
    assert!(group_conv(&mut tape, &[], m, x, &s).is_err());
}

#[test]
fn super_sep_examples() {
    let mut rng = Rng::seed(7);
    let x = random(&[2, 9, 6], &mut rng);
    let s1 = spec(
        3,
        2,
        ConvMode::SuperSeparable { groups: 1 },
        6,
        Padding::Same,
    );
    let (wd, wp) = (random(&[3, 6], &mut rng), random(&[6, 6], &mut rng));
    let sup = eval1(&x, |t, xv| {
        let (d, p) = (t.constant(wd.clone()), t.constant(wp.clone()));
        super_sep_conv(t, &[p], &[d], xv, &s1)
    });
    let sep = eval1(&x, |t, xv| {
        let (d, p) = (t.constant(wd.clone()), t.constant(wp.clone()));
        sep_conv(t, p, d, xv, &s1)
    });
    assert_eq!(sup.data(), sep.data());

    // g=2 equals separable convolution applied to each half.
    let s2 = spec(
        3,
        1,
        ConvMode::SuperSeparable { groups: 2 },
        6,
        Padding::Causal,
    );
    let wds = [random(&[3, 3], &mut rng), random(&[3, 3], &mut rng)];
    let wps = [random(&[3, 3], &mut rng), random(&[3, 3], &mut rng)];
    let sup = eval1(&x, |t, xv| {
        let ds: Vec<Var> = wds.iter().map(|w| t.constant(w.clone())).collect();
        let ps: Vec<Var> = wps.iter().map(|w| t.constant(w.clone())).collect();
        super_sep_conv(t, &ps, &ds, xv, &s2)
    });
    let half = ConvSpec::new(3, 1, ConvMode::Separable, 3, Padding::Causal);
    for g in 0..2 {
        let part = Tensor::from_fn(&[2, 9, 3], |i| x.data()[(i / 3) * 6 + g * 3 + i % 3]);
        let want = naive_conv(&part, &factored_full(&wds[g], &wps[g]), 1, half.span());
        for r in 0..18 {
            for ch in 0..3 {
                let got = sup.data()[r * 6 + g * 3 + ch];
                assert!((got - want.data()[r * 3 + ch]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn super_sep_groups_do_not_exchange_information() {
    let mut rng = Rng::seed(8);
    let x = random(&[1, 6, 4], &mut rng);
    let s = spec(
        3,
        1,
        ConvMode::SuperSeparable { groups: 2 },
        4,
        Padding::Same,
    );
    let kernels = Kernels::init(&s, &mut rng).unwrap();
    // d(sum of group-0 outputs)/d(group-1 inputs) must vanish, and vice versa.
    for (out_group, in_group) in [(0usize, 1usize), (1, 0)] {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let kv = kernels.map(|t| tape.constant(t.clone()));
        let y = apply(&mut tape, &s, &kv, xv).unwrap();
        let sel = tape.slice_depth(y, out_group * 2, 2).unwrap();
        let loss = tape.sum(sel);
        tape.backward(loss).unwrap();
        let g = tape.grad(xv).unwrap();
        for r in 0..6 {
            for ch in 0..2 {
                assert_eq!(g.data()[r * 4 + in_group * 2 + ch], 0.0);
            }
        }
        // and the own-group block is not identically zero
        assert!((0..6).any(|r| g.data()[r * 4 + out_group * 2] != 0.0));
    }
}

#[test]
fn pad_examples() {
    let mut rng = Rng::seed(9);
    let x = random(&[1, 5, 2], &mut rng);
    let s = spec(1, 1, ConvMode::Full, 2, Padding::Causal);
    assert_eq!(eval1(&x, |t, xv| pad(t, xv, &s)), x);

    let s = spec(3, 2, ConvMode::Full, 2, Padding::Causal);
    let padded = eval1(&x, |t, xv| pad(t, xv, &s));
    assert_eq!(padded.shape(), &[1, 9, 2]);
    assert!(padded.data()[..8].iter().all(|&v| v == 0.0));
    assert_eq!(&padded.data()[8..], x.data());

    let s = spec(3, 2, ConvMode::Full, 2, Padding::Same);
    assert_eq!(s.padding_amounts(), (2, 2));
}

#[test]
fn causal_outputs_ignore_future_inputs() {
    let mut rng = Rng::seed(10);
    for mode in [
        ConvMode::Full,
        ConvMode::Separable,
        ConvMode::SubSeparable { groups: 2 },
        ConvMode::SuperSeparable { groups: 2 },
    ] {
        let s = spec(3, 2, mode, 4, Padding::Causal);
        let kernels = Kernels::init(&s, &mut rng).unwrap();
        let x = random(&[1, 10, 4], &mut rng);
        let run = |x: &Tensor| {
            eval1(x, |t, xv| {
                let kv = kernels.map(|k| t.constant(k.clone()));
                apply(t, &s, &kv, xv)
            })
        };
        let base = run(&x);
        for t_pos in 0..9 {
            let mut probe = x.clone();
            for ch in 0..4 {
                probe.data_mut()[(t_pos + 1) * 4 + ch] += 1.7;
            }
            let moved = run(&probe);
            assert_eq!(
                &base.data()[..(t_pos + 1) * 4],
                &moved.data()[..(t_pos + 1) * 4]
            );
        }
    }
}

#[test]
fn causal_jacobian_upper_block_is_exactly_zero() {
    let mut rng = Rng::seed(11);
    let s = spec(5, 1, ConvMode::Separable, 3, Padding::Causal);
    let kernels = Kernels::init(&s, &mut rng).unwrap();
    let x = random(&[1, 8, 3], &mut rng);
    for t_out in 0..8 {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let kv = kernels.map(|k| tape.constant(k.clone()));
        let y = apply(&mut tape, &s, &kv, xv).unwrap();
        let mut sel = vec![0.0; 24];
        sel[t_out * 3..(t_out + 1) * 3].fill(1.0);
        let picked = tape.mul_const(y, sel).unwrap();
        let loss = tape.sum(picked);
        tape.backward(loss).unwrap();
        let g = tape.grad(xv).unwrap();
        assert!(g.data()[(t_out + 1) * 3..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn param_count_examples() {
    let c = 1000;
    let cases = [
        (ConvMode::Full, 3_000_000),
        (ConvMode::Separable, 1_003_000),
        (ConvMode::SubSeparable { groups: 16 }, 1_187_500),
        (ConvMode::SuperSeparable { groups: 2 }, 503_000),
    ];
    for (mode, want) in cases {
        let s = spec(3, 1, mode, c, Padding::Same);
        assert_eq!(param_count(&s).unwrap(), want, "{mode:?}");
        if s.validate().is_ok() {
            assert_eq!(allocated_params(&s).unwrap(), want, "{mode:?}");
        }
    }
    // 16 does not divide 1000, so the grouped spec has no allocation.
    let g16 = spec(
        3,
        1,
        ConvMode::SubSeparable { groups: 16 },
        c,
        Padding::Same,
    );
    assert!(allocated_params(&g16).is_err());
    let odd = spec(
        3,
        1,
        ConvMode::SuperSeparable { groups: 3 },
        1000,
        Padding::Same,
    );
    assert!(param_count(&odd).is_err());
    let s = spec(3, 1, ConvMode::Separable, 4, Padding::Same).with_channels(4, 8);
    assert!(matches!(param_count(&s), Err(ConvError::Unsupported(_))));
    assert_eq!(allocated_params(&s).unwrap(), 3 * 4 + 32);
}

#[test]
fn param_count_matches_allocation_small_grid() {
    let mut rng = Rng::seed(12);
    for k in [1, 2, 3, 5] {
        for c in [6, 12] {
            for mode in [
                ConvMode::Full,
                ConvMode::Separable,
                ConvMode::SubSeparable { groups: 2 },
                ConvMode::SubSeparable { groups: 3 },
                ConvMode::SuperSeparable { groups: 2 },
                ConvMode::SuperSeparable { groups: 6 },
            ] {
                let s = spec(k, 1, mode, c, Padding::Same);
                let kernels = Kernels::init(&s, &mut rng).unwrap();
                assert_eq!(kernels.num_params(), param_count(&s).unwrap());
            }
        }
    }
}

#[test]
fn receptive_field_examples() {
    let stack = |ks: &[usize], ds: &[usize]| -> Vec<ConvSpec> {
        ks.iter()
            .zip(ds)
            .map(|(&k, &d)| spec(k, d, ConvMode::Separable, 8, Padding::Same))
            .collect()
    };
    assert_eq!(receptive_field(&[]), 1);
    let one = stack(&[3], &[1]);
    assert_eq!(receptive_field(&one), 3);
    assert_eq!(probe_receptive_field(&one).unwrap(), 3);
    let dilated = stack(&[3, 3, 3, 3], &[1, 2, 4, 8]);
    assert_eq!(receptive_field(&dilated), 31);
    assert_eq!(probe_receptive_field(&dilated).unwrap(), 31);
    let wide = stack(&[3, 7, 15, 31], &[1, 1, 1, 1]);
    assert_eq!(receptive_field(&wide), 53);
    assert_eq!(probe_receptive_field(&wide).unwrap(), 53);
}

#[test]
fn receptive_field_matches_probe_on_random_stacks() {
    let mut rng = Rng::seed(13);
    for _ in 0..8 {
        let layers = rng.between(1, 4);
        let padding = if rng.bernoulli(0.5) {
            Padding::Same
        } else {
            Padding::Causal
        };
        let stack: Vec<ConvSpec> = (0..layers)
            .map(|_| {
                spec(
                    rng.between(1, 6),
                    rng.between(1, 4),
                    ConvMode::Full,
                    2,
                    padding,
                )
            })
            .collect();
        assert_eq!(
            probe_receptive_field(&stack).unwrap(),
            receptive_field(&stack),
            "{stack:?}"
        );
    }
}

/// Enumeration oracle: walk every tap combination explicitly.
fn enumerate_paths(stack: &[ConvSpec]) -> std::collections::BTreeMap<i64, u64> {
    let mut paths = std::collections::BTreeMap::new();
    let mut choice = vec![0usize; stack.len()];
    loop {
        let offset: i64 = stack
            .iter()
            .zip(&choice)
            .map(|(s, &j)| (j * s.dilation) as i64 - s.padding_amounts().0 as i64)
            .sum();
        *paths.entry(offset).or_insert(0) += 1;
        let mut i = 0;
        loop {
            if i == stack.len() {
                return paths;
            }
            choice[i] += 1;
            if choice[i] < stack[i].k {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
    }
}

#[test]
fn coverage_examples() {
    let mk = |pairs: &[(usize, usize)]| -> Vec<ConvSpec> {
        pairs
            .iter()
            .map(|&(k, d)| spec(k, d, ConvMode::Separable, 8, Padding::Same))
            .collect()
    };
    let undilated = mk(&[(3, 1), (7, 1), (15, 1), (31, 1)]);
    assert!(coverage_profile(&undilated).dead_zones().is_empty());

    let single = coverage_profile(&mk(&[(3, 2)]));
    assert_eq!(single.offsets, vec![-2, -1, 0, 1, 2]);
    assert_eq!(single.dead_zones(), vec![-1, 1]);

    let common = coverage_profile(&mk(&[(3, 2), (3, 4)]));
    let coprime = coverage_profile(&mk(&[(3, 2), (3, 3)]));
    assert!(common.dead_zones().len() > coprime.dead_zones().len());
    // Same receptive-field budget (13): dilations 2,4 versus coprime 1,5.
    let coprime13 = coverage_profile(&mk(&[(3, 1), (3, 5)]));
    assert_eq!(common.receptive_field(), coprime13.receptive_field());
    assert!(common.dead_zones().len() > coprime13.dead_zones().len());

    for stack in [
        mk(&[(3, 2), (3, 4)]),
        mk(&[(3, 1), (3, 2), (3, 4), (3, 8)]),
        mk(&[(2, 3), (4, 1)]),
    ] {
        let prof = coverage_profile(&stack);
        let paths = enumerate_paths(&stack);
        for (&o, &c) in prof.offsets.iter().zip(&prof.counts) {
            assert_eq!(paths.get(&o).copied().unwrap_or(0), c);
        }
        assert_eq!(paths.values().sum::<u64>(), prof.counts.iter().sum::<u64>());
    }
}

#[test]
fn oracle_equivalence_randomized() {
    let mut rng = Rng::seed(14);
    for round in 0..20 {
        let depth = 6 * rng.between(1, 2);
        let k = rng.between(1, 5);
        let d = rng.between(1, 3);
        let padding = if round % 2 == 0 {
            Padding::Same
        } else {
            Padding::Causal
        };
        let x = random(&[2, 9, depth], &mut rng);
        let left = spec(k, d, ConvMode::Full, depth, padding)
            .padding_amounts()
            .0;

        let s = spec(k, d, ConvMode::Separable, depth, padding);
        let (wd, wp) = (
            random(&[k, depth], &mut rng),
            random(&[depth, depth], &mut rng),
        );
        let got = eval1(&x, |t, xv| {
            let (d, p) = (t.constant(wd.clone()), t.constant(wp.clone()));
            sep_conv(t, p, d, xv, &s)
        });
        assert!(got.max_abs_diff(&naive_conv(&x, &factored_full(&wd, &wp), d, left)) < 1e-12);

        let s = spec(k, d, ConvMode::SubSeparable { groups: 1 }, depth, padding);
        let w = random(&[k, depth, depth], &mut rng);
        let got = eval1(&x, |t, xv| {
            let (g, m) = (t.constant(w.clone()), t.constant(Tensor::eye(depth)));
            group_conv(t, &[g], m, xv, &s)
        });
        assert!(got.max_abs_diff(&naive_conv(&x, &w, d, left)) < 1e-12);

        let s = spec(k, d, ConvMode::SuperSeparable { groups: 1 }, depth, padding);
        let got = eval1(&x, |t, xv| {
            let (d, p) = (t.constant(wd.clone()), t.constant(wp.clone()));
            super_sep_conv(t, &[p], &[d], xv, &s)
        });
        assert!(got.max_abs_diff(&naive_conv(&x, &factored_full(&wd, &wp), d, left)) < 1e-12);

        let g = if depth.is_multiple_of(3) && round % 3 == 0 {
            3
        } else {
            2
        };
        let s = spec(k, d, ConvMode::SuperSeparable { groups: g }, depth, padding);
        let kernels = Kernels::init(&s, &mut rng).unwrap();
        let got = eval1(&x, |t, xv| {
            let kv = kernels.map(|k| t.constant(k.clone()));
            apply(t, &s, &kv, xv)
        });
        let KernelSet::SuperSeparable {
            depthwise,
            pointwise,
        } = &kernels
        else {
            unreachable!()
        };
        let blocks: Vec<Tensor> = depthwise
            .iter()
            .zip(pointwise)
            .map(|(d, p)| factored_full(d, p))
            .collect();
        let want = naive_conv(&x, &block_diagonal(&blocks, depth, depth), d, left);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn stack_json_parsing() {
    let stack = parse_stack(r#"[{"k":3,"d":1},{"k":3,"d":2,"mode":"full","c":8}]"#).unwrap();
    assert_eq!(stack.len(), 2);
    assert_eq!(stack[1].mode, ConvMode::Full);
    assert_eq!(stack[1].c_in, 8);
    assert!(parse_stack("[{\"k\":3}]").is_err());
    assert!(parse_stack("[{\"k\":3,\"d\":1,\"bogus\":1}]").is_err());
    assert!(parse_stack("not json").is_err());
    let eq = undilated_equivalent(&parse_stack(r#"[{"k":3,"d":4}]"#).unwrap());
    assert_eq!((eq[0].k, eq[0].dilation), (9, 1));
}
