use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    avg_pool2, avg_pool2_backward, conv3x3, conv3x3_backward, shift_backward, shift_forward,
};
use super::weights::slot;
use super::*;
use crate::error::Error;
use crate::preprocess::{ChannelStats, NormOrder};

fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let n = dims.iter().product();
    Tensor4::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        input_size: 6,
        conv_channels: 4,
        out_channels: 4,
        merge_channels: 4,
        hidden: 8,
        pool_head: false,
    }
}

fn random_input(size: usize, n: usize, rng: &mut ChaCha8Rng) -> NetInput<f64> {
    let diffs = random_tensor([n, 3, size, size], rng);
    let appearance = random_tensor([1, 3, size, size], rng);
    let stats = ChannelStats {
        mean: [0.05, -0.02, 0.01],
        std: [0.4, 0.5, 0.6],
    };
    NetInput::new(diffs, stats, appearance).unwrap()
}

/// Weights with every entry random, biases included, so no gradient path is
/// trivially zero.
fn random_weights(arch: ArchConfig, seed: u64) -> NetworkWeights<f64> {
    let mut w = NetworkWeights::<f64>::init(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for p in w.params_mut() {
        if p.name.ends_with("bias") || p.name == "norm.gamma" {
            p.data
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
        if p.name == "norm.beta" {
            p.data.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        }
    }
    w
}

#[test]
fn shift_of_two_frames_by_hand() {
    let (a1, b1, c1, a2, b2, c2) = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
    let x = Tensor4::new([2, 3, 1, 1], vec![a1, b1, c1, a2, b2, c2]).unwrap();
    let y = temporal_shift(&x).unwrap();
    assert_eq!(y.data(), &[a2, 0.0, c1, 0.0, b1, c2]);
    let _ = b2;
}

#[test]
fn shift_edge_cases() {
    let zeros = Tensor4::<f32>::zeros([4, 6, 2, 2]);
    assert_eq!(temporal_shift(&zeros).unwrap(), zeros);
    let single = Tensor4::<f32>::zeros([1, 3, 2, 2]);
    assert!(matches!(temporal_shift(&single), Err(Error::Validation(_))));
    // C = 4: blocks of 1, 1 and 2 channels
    let x = Tensor4::new(
        [2, 4, 1, 1],
        vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
    )
    .unwrap();
    assert_eq!(
        temporal_shift(&x).unwrap().data(),
        &[5.0, 0.0, 3.0, 4.0, 0.0, 2.0, 7.0, 8.0]
    );
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (cin, cout, h, w) = (3, 5, 4, 6);
    let x = random_tensor([2, cin, h, w], &mut rng);
    let weight: Vec<f64> = (0..cout * cin * 9)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = conv3x3(&x, &weight, &bias, cout);
    for t in 0..2 {
        for co in 0..cout {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) =
                                    (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += weight[((co * cin + ci) * 3 + ky) * 3 + kx]
                                    * x.frame(t)[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    let got = y.frame(t)[(co * h + yy) * w + xx];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_backward_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (cin, cout) = (4, 3);
    let x = random_tensor([2, cin, 5, 5], &mut rng);
    let g = random_tensor([2, cout, 5, 5], &mut rng);
    let weight: Vec<f64> = (0..cout * cin * 9)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let zero_bias = vec![0.0; cout];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; cout];
    let dx = conv3x3_backward(&x, &weight, &g, &mut dw, &mut db, true).unwrap();
    // <conv(x), g> = <x, conv^T(g)>
    let lhs = dot(&conv3x3(&x, &weight, &zero_bias, cout), &g);
    assert!((lhs - dot(&x, &dx)).abs() < 1e-10);
    // linear in the weights as well: <conv_w(x), g> = <w, dw>
    let wdot: f64 = weight.iter().zip(&dw).map(|(a, b)| a * b).sum();
    assert!((lhs - wdot).abs() < 1e-10);
    let gsum: f64 = (0..cout)
        .map(|c| {
            g.data()
                .chunks(25)
                .skip(c)
                .step_by(cout)
                .flatten()
                .sum::<f64>()
        })
        .sum();
    assert!((db.iter().sum::<f64>() - gsum).abs() < 1e-10);
}

#[test]
fn pool_and_shift_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor([3, 6, 6, 6], &mut rng);
    let gp = random_tensor([3, 6, 3, 3], &mut rng);
    assert!((dot(&avg_pool2(&x), &gp) - dot(&x, &avg_pool2_backward(&gp, x.dims()))).abs() < 1e-12);
    let gs = random_tensor([3, 6, 6, 6], &mut rng);
    assert!(
        (dot(&shift_forward(&x, true), &gs) - dot(&x, &shift_backward(&gs, true))).abs() < 1e-12
    );
}

#[test]
fn odd_pooling_drops_the_last_row_and_column() {
    let x = Tensor4::new([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    assert_eq!(avg_pool2(&x).data(), &[3.0]);
}

#[test]
fn mask_with_zero_weights_is_one_half() {
    let x = random_tensor([2, 3, 4, 5], &mut ChaCha8Rng::seed_from_u64(4));
    let m = attention_mask(&x, &[0.0; 3], 0.0).unwrap();
    assert_eq!(m.dims(), [2, 1, 4, 5]);
    assert!(m.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
}

#[test]
fn mask_concentrates_on_a_hot_pixel() {
    let mut data = vec![-50.0f64; 9];
    data[4] = 50.0;
    let x = Tensor4::new([1, 1, 3, 3], data).unwrap();
    let m = attention_mask(&x, &[1.0], 0.0).unwrap();
    assert!((m.data()[4] - 4.5).abs() < 1e-9);
    assert!(m
        .data()
        .iter()
        .enumerate()
        .all(|(i, v)| i == 4 || v.abs() < 1e-9));
    assert!(attention_mask(&x, &[1.0, 2.0], 0.0).is_err());
}

#[test]
fn standard_branch_shape_trace() {
    let arch = ArchConfig::standard();
    let w = NetworkWeights::<f32>::init(arch, 0).unwrap();
    let input = NetInput::new(
        Tensor4::zeros([9, 3, 36, 36]),
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        },
        Tensor4::zeros([1, 3, 36, 36]),
    )
    .unwrap();
    let traces = branch_shape_trace(&input, &w, &ModelOptions::default()).unwrap();
    let expected = vec![
        [3, 36, 36],
        [32, 36, 36],
        [32, 36, 36],
        [32, 18, 18],
        [32, 18, 18],
        [64, 18, 18],
        [64, 9, 9],
    ];
    assert_eq!(traces, vec![expected.clone(), expected]);
}

#[test]
fn groups_cover_the_window() {
    assert_eq!(group_ranges(9), vec![0..3, 3..6, 6..9]);
    assert_eq!(group_ranges(29), vec![0..10, 10..20, 20..29]);
    assert_eq!(segment_frames(9), vec![1, 4, 7]);
    assert_eq!(segment_frames(29), vec![5, 15, 24]);
}

#[test]
fn zero_window_gives_zero_output() {
    let w = NetworkWeights::<f64>::init(tiny_arch(), 5).unwrap();
    let input = NetInput::new(
        Tensor4::zeros([9, 3, 6, 6]),
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        },
        random_tensor([1, 3, 6, 6], &mut ChaCha8Rng::seed_from_u64(1)),
    )
    .unwrap();
    for seed in [None, Some(3)] {
        let out = forward(&input, &w, &ModelOptions::default(), seed).unwrap();
        assert_eq!(out, vec![0.0; 9]);
    }
}

#[test]
fn zero_weights_and_target_give_zero_gradients() {
    let w = NetworkWeights::<f64>::init(tiny_arch(), 5)
        .unwrap()
        .zeros_like();
    let input = random_input(6, 9, &mut ChaCha8Rng::seed_from_u64(6));
    let (loss, g) = backward(&input, &w, &ModelOptions::default(), &[0.0; 9], Some(1)).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.params().iter().all(|p| p.data.iter().all(|v| *v == 0.0)));
}

#[test]
fn inference_is_deterministic_and_threading_is_invisible() {
    let arch = ArchConfig {
        input_size: 12,
        ..tiny_arch()
    };
    let w = random_weights(arch, 7);
    let input = random_input(12, 9, &mut ChaCha8Rng::seed_from_u64(7));
    let seq = ModelOptions::default();
    let par = ModelOptions {
        parallel: true,
        ..seq
    };
    let a = forward(&input, &w, &seq, None).unwrap();
    assert_eq!(a, forward(&input, &w, &seq, None).unwrap());
    assert_eq!(a, forward(&input, &w, &par, None).unwrap());
    let target = vec![0.3; 9];
    let (l1, g1) = backward(&input, &w, &seq, &target, Some(9)).unwrap();
    let (l2, g2) = backward(&input, &w, &par, &target, Some(9)).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn dropout_only_in_training_mode() {
    let w = random_weights(tiny_arch(), 8);
    let input = random_input(6, 9, &mut ChaCha8Rng::seed_from_u64(8));
    let opts = ModelOptions::default();
    let infer = forward(&input, &w, &opts, None).unwrap();
    let a = forward(&input, &w, &opts, Some(1)).unwrap();
    assert_eq!(a, forward(&input, &w, &opts, Some(1)).unwrap());
    assert_ne!(a, infer);
    let no_drop = w.clone().with_dropout(0.0, 0.0).unwrap();
    assert_eq!(
        forward(&input, &no_drop, &opts, Some(1)).unwrap(),
        forward(&input, &no_drop, &opts, None).unwrap()
    );
}

#[test]
fn window_length_is_free() {
    let w = random_weights(tiny_arch(), 9);
    for n in [3, 9, 10, 29] {
        let input = random_input(6, n, &mut ChaCha8Rng::seed_from_u64(n as u64));
        assert_eq!(
            forward(&input, &w, &ModelOptions::default(), None)
                .unwrap()
                .len(),
            n
        );
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    let w = random_weights(tiny_arch(), 9);
    let input = random_input(8, 9, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(matches!(
        forward(&input, &w, &ModelOptions::default(), None),
        Err(Error::Validation(_))
    ));
    let input = random_input(6, 9, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(backward(&input, &w, &ModelOptions::default(), &[0.0; 4], None).is_err());
}

#[test]
fn non_finite_weights_name_the_layer() {
    let mut w = random_weights(tiny_arch(), 10);
    w.params_mut()[slot::MERGE_B].data[0] = f64::NAN;
    let input = random_input(6, 9, &mut ChaCha8Rng::seed_from_u64(1));
    match forward(&input, &w, &ModelOptions::default(), None) {
        Err(Error::Numeric { layer, .. }) => assert_eq!(layer, "merge"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn doubled_residuals_scale_loss_and_gradients() {
    let w = random_weights(tiny_arch(), 11);
    let input = random_input(6, 9, &mut ChaCha8Rng::seed_from_u64(11));
    let opts = ModelOptions::default();
    let target: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
    let out = forward(&input, &w, &opts, Some(4)).unwrap();
    let doubled: Vec<f64> = out.iter().zip(&target).map(|(o, t)| 2.0 * t - o).collect();
    let (l1, g1) = backward(&input, &w, &opts, &target, Some(4)).unwrap();
    let (l2, g2) = backward(&input, &w, &opts, &doubled, Some(4)).unwrap();
    assert!((l2 - 4.0 * l1).abs() < 1e-12 * l2.max(1.0));
    for (a, b) in g1.params().iter().zip(g2.params()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((y - 2.0 * x).abs() < 1e-10 * (1.0 + y.abs()), "{}", a.name);
        }
    }
}

/// Central-difference check of `count` coordinates, spread over every
/// tensor. Returns the worst relative error.
fn gradient_check(arch: ArchConfig, opts: &ModelOptions, seed: u64, count: usize) -> f64 {
    let w = random_weights(arch, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_input(6, 9, &mut rng);
    let target: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let drop_seed = Some(seed);
    let (_, grads) = backward(&input, &w, opts, &target, drop_seed).unwrap();
    let loss_at = |w: &NetworkWeights<f64>| {
        let out = forward(&input, w, opts, drop_seed).unwrap();
        out.iter()
            .zip(&target)
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / out.len() as f64
    };
    let eps = 1e-3;
    let mut worst = 0.0f64;
    for k in 0..count {
        let p = k % w.params().len();
        let i = rng.gen_range(0..w.params()[p].data.len());
        let mut plus = w.clone();
        plus.params_mut()[p].data[i] += eps;
        let mut minus = w.clone();
        minus.params_mut()[p].data[i] -= eps;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
        let analytic = grads.params()[p].data[i];
        let scale = analytic.abs().max(numeric.abs());
        // both effectively zero (e.g. the shift parameter of the
        // affine-first normalization, which cancels exactly)
        let rel = if scale < 1e-9 {
            0.0
        } else {
            (analytic - numeric).abs() / scale
        };
        assert!(
            rel < 1e-3,
            "{}[{i}]: analytic {analytic:e} numeric {numeric:e}",
            w.params()[p].name
        );
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    gradient_check(tiny_arch(), &ModelOptions::default(), 21, 200);
}

#[test]
fn gradients_match_finite_differences_in_every_mode() {
    let variants = [
        ModelOptions {
            shift: false,
            ..Default::default()
        },
        ModelOptions {
            mask: false,
            ..Default::default()
        },
        ModelOptions {
            branches: BranchMode::Adjacent,
            ..Default::default()
        },
        ModelOptions {
            norm_order: NormOrder::StandardizeFirst,
            ..Default::default()
        },
    ];
    for (k, opts) in variants.iter().enumerate() {
        gradient_check(tiny_arch(), opts, 30 + k as u64, 64);
    }
    let pooled = ArchConfig {
        pool_head: true,
        ..tiny_arch()
    };
    gradient_check(pooled, &ModelOptions::default(), 40, 64);
}

#[test]
fn shift_does_not_touch_the_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (on, off) = (dir.path().join("on"), dir.path().join("off"));
    for (path, shift) in [(&on, true), (&off, false)] {
        let opts = ModelOptions {
            shift,
            ..Default::default()
        };
        // the options only steer computation; build and save under each
        let w = NetworkWeights::<f32>::init(ArchConfig::standard(), 42).unwrap();
        let input = NetInput::new(
            Tensor4::zeros([9, 3, 36, 36]),
            ChannelStats {
                mean: [0.0; 3],
                std: [1.0; 3],
            },
            Tensor4::zeros([1, 3, 36, 36]),
        )
        .unwrap();
        forward(&input, &w, &opts, None).unwrap();
        save_weights(&w, path).unwrap();
    }
    for file in [weights::MANIFEST_FILE, weights::BLOB_FILE] {
        assert_eq!(
            std::fs::read(on.join(file)).unwrap(),
            std::fs::read(off.join(file)).unwrap()
        );
    }
}

fn tiny_dataset(n: usize, zero_target: bool) -> Vec<Sample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    (0..n)
        .map(|_| {
            let input = random_input(6, 9, &mut rng);
            let target = if zero_target {
                vec![0.0; 9]
            } else {
                // mean of the green channel per frame, a learnable readout
                (0..9)
                    .map(|f| input.diffs.frame(f)[36..72].iter().sum::<f64>() / 36.0)
                    .collect()
            };
            Sample::single(input, target)
        })
        .collect()
}

#[test]
fn zero_targets_are_fitted() {
    let data = vec![tiny_dataset(1, true)[0].clone(); 8];
    let w = random_weights(tiny_arch(), 12);
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 4,
        ..Default::default()
    };
    let (_, report) = train(&data, w, &ModelOptions::default(), &cfg, |_| {}).unwrap();
    assert!(report.final_loss < 1e-3, "{report:?}");
    assert!(report.final_loss < report.initial_loss);
}

#[test]
fn training_is_reproducible_and_reduces_loss() {
    let data = tiny_dataset(16, false);
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 4,
        seed: 3,
        ..Default::default()
    };
    let run = || {
        let w = NetworkWeights::<f64>::init(tiny_arch(), 13).unwrap();
        train(&data, w, &ModelOptions::default(), &cfg, |_| {}).unwrap()
    };
    let (w1, r1) = run();
    let (w2, r2) = run();
    assert_eq!(w1, w2);
    assert_eq!(r1, r2);
    assert!(r1.final_loss < r1.initial_loss, "{r1:?}");
    assert_eq!(r1.epochs.len(), 15);
}

#[test]
fn empty_dataset_is_rejected() {
    let w = NetworkWeights::<f64>::init(tiny_arch(), 1).unwrap();
    assert!(train(
        &[],
        w,
        &ModelOptions::default(),
        &TrainConfig::default(),
        |_| {}
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shift_is_linear_and_never_grows(seed in 0u64..10_000, t in 2usize..6, c in 1usize..8, a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor([t, c, 2, 3], &mut rng);
        let y = random_tensor([t, c, 2, 3], &mut rng);
        let sx = temporal_shift(&x).unwrap();
        prop_assert!(sx.norm_sq() <= x.norm_sq() + 1e-12);
        let combo = Tensor4::new(x.dims(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + q).collect()).unwrap();
        let lhs = temporal_shift(&combo).unwrap();
        let sy = temporal_shift(&y).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(sx.data()).zip(sy.data()) {
            prop_assert!((l - (a * p + q)).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_sums_to_half_the_area(seed in 0u64..10_000, h in 1usize..12, w in 1usize..12, c in 1usize..5, scale in 0.01f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor([2, c, h, w], &mut rng);
        let omega: Vec<f64> = (0..c).map(|_| rng.gen_range(-scale..scale)).collect();
        let m = attention_mask(&x, &omega, rng.gen_range(-scale..scale)).unwrap();
        for f in 0..2 {
            let sum: f64 = m.frame(f).iter().map(|v| v.abs()).sum();
            prop_assert!((sum - (h * w) as f64 / 2.0).abs() < 1e-5);
        }
    }
}

#[test]
fn running_sum_loss_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let out: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, grad) = window_loss(&out, &target, 0.7);
    for j in 0..out.len() {
        let mut hi = out.clone();
        let mut lo = out.clone();
        hi[j] += 1e-6;
        lo[j] -= 1e-6;
        let fd = (window_loss(&hi, &target, 0.7).0 - window_loss(&lo, &target, 0.7).0) / 2e-6;
        assert!((fd - grad[j]).abs() < 1e-6, "{j}: {fd} vs {}", grad[j]);
    }
    // a shared bias costs more than the same errors with alternating signs
    let bias = vec![0.1; 9];
    let zigzag: Vec<f64> = (0..9)
        .map(|i| if i % 2 == 0 { 0.1 } else { -0.1 })
        .collect();
    let zero = vec![0.0; 9];
    assert!(window_loss(&bias, &zero, 1.0).0 > 10.0 * window_loss(&zigzag, &zero, 1.0).0);
    assert_eq!(
        window_loss(&bias, &zero, 0.0).0,
        window_loss(&zigzag, &zero, 0.0).0
    );
}
