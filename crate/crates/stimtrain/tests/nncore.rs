//! Network construction, masked forward, backward and checkpoint contracts.

use ndarray::{Array2, Array4, IxDyn};
use rand::Rng;

use stimtrain::gradcheck;
use stimtrain::losses;
use stimtrain::nn::{
    build_network, read_container, write_container, BlockKind, DepthMask, Mode, NetworkSpec,
    ParamKind, StemSpec,
};
use stimtrain::rng::{stream, Stream};

fn small_spec() -> NetworkSpec {
    NetworkSpec {
        stage_blocks: vec![2, 2],
        stage_widths: vec![4, 6],
        num_classes: 5,
        stem: StemSpec::default(),
        block_kind: BlockKind::Basic,
        input_channels: 3,
    }
}

#[test]
fn build_is_deterministic_in_the_seed() {
    let spec = small_spec();
    let (_, a) = build_network::<f32>(&spec, 0).unwrap();
    let (_, b) = build_network::<f32>(&spec, 0).unwrap();
    for (name, pa) in a.iter() {
        assert_eq!(&pa.value, b.get(name), "{name}");
    }
    let (_, c) = build_network::<f32>(&spec, 1).unwrap();
    assert_ne!(a.get("stem.conv.weight"), c.get("stem.conv.weight"));
}

#[test]
fn invalid_spec_is_a_configuration_error() {
    let mut spec = small_spec();
    spec.stage_blocks = vec![0, 2];
    let err = build_network::<f32>(&spec, 0).unwrap_err().to_string();
    assert!(err.contains("configuration error"), "{err}");
    assert!(err.contains("stage_blocks[0]"), "{err}");
}

/// Independent layer-by-layer tally of trainable parameters and state.
fn tally(spec: &NetworkSpec) -> (usize, usize) {
    let expansion = match spec.block_kind {
        BlockKind::Basic => 1,
        BlockKind::Bottleneck => 4,
    };
    let mut trainable = 0usize;
    let mut state = 0usize;
    let bn = |ch: usize, trainable: &mut usize, state: &mut usize| {
        *trainable += 2 * ch;
        *state += 2 * ch;
    };
    let stem_out = spec.stage_widths[0];
    trainable += spec.stem.kernel * spec.stem.kernel * spec.input_channels * stem_out;
    bn(stem_out, &mut trainable, &mut state);
    let mut in_ch = stem_out;
    for (si, (&n, &w)) in spec.stage_blocks.iter().zip(&spec.stage_widths).enumerate() {
        let out_ch = w * expansion;
        for bi in 0..n {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            match spec.block_kind {
                BlockKind::Basic => {
                    trainable += 9 * in_ch * w + 9 * w * w;
                    bn(w, &mut trainable, &mut state);
                    bn(w, &mut trainable, &mut state);
                }
                BlockKind::Bottleneck => {
                    trainable += in_ch * w + 9 * w * w + w * out_ch;
                    bn(w, &mut trainable, &mut state);
                    bn(w, &mut trainable, &mut state);
                    bn(out_ch, &mut trainable, &mut state);
                }
            }
            if stride != 1 || in_ch != out_ch {
                trainable += in_ch * out_ch;
                bn(out_ch, &mut trainable, &mut state);
            }
            in_ch = out_ch;
        }
    }
    trainable += in_ch * spec.num_classes + spec.num_classes;
    (trainable, trainable + state)
}

#[test]
fn parameter_count_matches_independent_tally() {
    for spec in [
        NetworkSpec::resnet_cifar(20, 10).unwrap(),
        NetworkSpec::resnet_cifar(8, 10).unwrap(),
        NetworkSpec::bottleneck_quarter(10),
        small_spec(),
    ] {
        let (_, ps) = build_network::<f32>(&spec, 0).unwrap();
        let (want_trainable, want_total) = tally(&spec);
        assert_eq!(ps.num_trainable_scalars(), want_trainable, "{spec:?}");
        assert_eq!(ps.num_scalars(), want_total, "{spec:?}");
    }
}

#[test]
fn full_mask_forward_is_bit_identical_to_unmasked() {
    let spec = small_spec();
    let (net, ps) = build_network::<f32>(&spec, 3).unwrap();
    let full = DepthMask::full(&spec);
    let mut rng = stream(9, Stream::Probe, 0, 0);
    for trial in 0..10 {
        let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(-1.0f32..1.0));
        let mode = if trial % 2 == 0 { Mode::Eval } else { Mode::Train };
        let (a, _) = net.forward(&ps, &full, &x, mode).unwrap();
        let (b, _) = net.forward_unmasked(&ps, &x, mode).unwrap();
        let max = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert_eq!(max, 0.0);
    }
}

#[test]
fn minimal_mask_on_zero_batch_stays_finite() {
    let spec = small_spec();
    let (net, ps) = build_network::<f32>(&spec, 4).unwrap();
    let mask = DepthMask::new(vec![1, 1], &spec).unwrap();
    let x = Array4::<f32>::zeros((2, 3, 8, 8));
    let (logits, _) = net.forward(&ps, &mask, &x, Mode::Eval).unwrap();
    assert!(logits.iter().all(|v| v.is_finite()));
}

#[test]
fn mask_mismatch_and_nonfinite_input_error() {
    let spec = small_spec();
    let (net, ps) = build_network::<f32>(&spec, 4).unwrap();
    let bad_spec = NetworkSpec { stage_blocks: vec![2, 2, 2], stage_widths: vec![4, 6, 8], ..small_spec() };
    let bad_mask = DepthMask::full(&bad_spec);
    let x = Array4::<f32>::zeros((1, 3, 8, 8));
    assert!(net.forward(&ps, &bad_mask, &x, Mode::Eval).is_err());

    let mut x = x;
    x[[0, 0, 0, 0]] = f32::NAN;
    let err = match net.forward(&ps, &DepthMask::full(&spec), &x, Mode::Eval) {
        Err(e) => e.to_string(),
        Ok(_) => panic!("non-finite input accepted"),
    };
    assert!(err.contains("input error"), "{err}");
}

/// Pencil-and-paper forward: single basic block, 1x1 input, hand-set weights.
#[test]
fn hand_computed_forward_oracle() {
    let spec = NetworkSpec {
        stage_blocks: vec![1],
        stage_widths: vec![2],
        num_classes: 2,
        stem: StemSpec::default(),
        block_kind: BlockKind::Basic,
        input_channels: 1,
    };
    let (net, mut ps) = build_network::<f64>(&spec, 0).unwrap();

    // zero all conv weights, then set only the center taps
    let a = 0.7f64;
    let eps = 1e-5f64;
    let bn = |v: f64| v / (1.0 + eps).sqrt();

    ps.get_mut("stem.conv.weight").fill(0.0);
    // (kh, kw, cin, cout) center = [1, 1, 0, oc]
    ps.get_mut("stem.conv.weight")[IxDyn(&[1, 1, 0, 0])] = 2.0;
    ps.get_mut("stem.conv.weight")[IxDyn(&[1, 1, 0, 1])] = -3.0;

    ps.get_mut("stage0.block0.conv1.weight").fill(0.0);
    ps.get_mut("stage0.block0.conv1.weight")[IxDyn(&[1, 1, 0, 0])] = 0.5;
    ps.get_mut("stage0.block0.conv1.weight")[IxDyn(&[1, 1, 1, 0])] = 1.0;
    ps.get_mut("stage0.block0.conv1.weight")[IxDyn(&[1, 1, 0, 1])] = -1.0;
    ps.get_mut("stage0.block0.conv1.weight")[IxDyn(&[1, 1, 1, 1])] = 0.25;

    ps.get_mut("stage0.block0.conv2.weight").fill(0.0);
    ps.get_mut("stage0.block0.conv2.weight")[IxDyn(&[1, 1, 0, 0])] = 1.5;
    ps.get_mut("stage0.block0.conv2.weight")[IxDyn(&[1, 1, 1, 0])] = -0.5;
    ps.get_mut("stage0.block0.conv2.weight")[IxDyn(&[1, 1, 0, 1])] = 2.0;
    ps.get_mut("stage0.block0.conv2.weight")[IxDyn(&[1, 1, 1, 1])] = 1.0;

    // fc: weight (2, 2), bias (2)
    ps.get_mut("fc.weight")
        .assign(&ndarray::arr2(&[[1.0, -2.0], [0.5, 3.0]]).into_dyn());
    ps.get_mut("fc.bias").assign(&ndarray::arr1(&[0.1, -0.2]).into_dyn());

    // hand evaluation, eval mode (running stats: mean 0, var 1)
    let s0 = bn(2.0 * a).max(0.0);
    let s1 = bn(-3.0 * a).max(0.0);
    let h0 = bn(0.5 * s0 + 1.0 * s1).max(0.0);
    let h1 = bn(-1.0 * s0 + 0.25 * s1).max(0.0);
    let m0 = bn(1.5 * h0 - 0.5 * h1);
    let m1 = bn(2.0 * h0 + 1.0 * h1);
    let y0 = (m0 + s0).max(0.0);
    let y1 = (m1 + s1).max(0.0);
    let want0 = y0 * 1.0 + y1 * 0.5 + 0.1;
    let want1 = y0 * -2.0 + y1 * 3.0 - 0.2;

    let x = Array4::from_shape_vec((1, 1, 1, 1), vec![a]).unwrap();
    let (logits, _) = net
        .forward(&ps, &DepthMask::full(&spec), &x, Mode::Eval)
        .unwrap();
    assert!((logits[[0, 0]] - want0).abs() < 1e-12, "{} vs {want0}", logits[[0, 0]]);
    assert!((logits[[0, 1]] - want1).abs() < 1e-12, "{} vs {want1}", logits[[0, 1]]);
}

#[test]
fn skipped_blocks_receive_exactly_zero_gradient() {
    let spec = small_spec();
    let (net, mut ps) = build_network::<f64>(&spec, 5).unwrap();
    let mask = DepthMask::new(vec![1, 1], &spec).unwrap();
    let mut rng = stream(10, Stream::Probe, 0, 0);
    let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(-1.0..1.0));
    ps.zero_grads();
    let (logits, tape) = net.forward(&ps, &mask, &x, Mode::Train).unwrap();
    let dl = Array2::<f64>::ones(logits.dim());
    net.backward(&mut ps, tape, &dl).unwrap();

    let mut skipped = 0;
    let mut active_nonzero = 0;
    for (name, p) in ps.iter() {
        if name.contains("block1") {
            assert!(p.grad.iter().all(|&g| g == 0.0), "{name} got gradient");
            skipped += 1;
        } else if p.kind.trainable() && p.grad.iter().any(|&g| g != 0.0) {
            active_nonzero += 1;
        }
    }
    assert!(skipped > 0 && active_nonzero > 0);
}

#[test]
fn zero_loss_gives_zero_gradients_everywhere() {
    let spec = small_spec();
    let (net, mut ps) = build_network::<f64>(&spec, 6).unwrap();
    let x = Array4::from_elem((1, 3, 8, 8), 0.3);
    ps.zero_grads();
    let (logits, tape) = net.forward(&ps, &DepthMask::full(&spec), &x, Mode::Train).unwrap();
    let dl = Array2::<f64>::zeros(logits.dim());
    let dx = net.backward(&mut ps, tape, &dl).unwrap();
    assert!(ps.iter().all(|(_, p)| p.grad.iter().all(|&g| g == 0.0)));
    assert!(dx.iter().all(|&g| g == 0.0));
}

#[test]
fn zero_classifier_bias_gradient_is_softmax_minus_labels() {
    let spec = small_spec();
    let (net, mut ps) = build_network::<f64>(&spec, 7).unwrap();
    ps.get_mut("fc.weight").fill(0.0);
    ps.get_mut("fc.bias").fill(0.0);
    let mut rng = stream(11, Stream::Probe, 0, 0);
    let b = 6;
    let x = Array4::from_shape_fn((b, 3, 8, 8), |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..spec.num_classes)).collect();

    ps.zero_grads();
    let (logits, tape) = net.forward(&ps, &DepthMask::full(&spec), &x, Mode::Eval).unwrap();
    assert!(logits.iter().all(|&v| v == 0.0));
    let (_, dlogits) = losses::cross_entropy_with_grad(&logits, &labels).unwrap();
    net.backward(&mut ps, tape, &dlogits).unwrap();

    // with zero weights, p = uniform; db_j = (1/B) sum_b (p_j - [y_b == j])
    let n = spec.num_classes;
    let mut want = vec![1.0 / n as f64; n];
    for &y in &labels {
        want[y] -= 1.0 / b as f64;
    }
    let got = ps.grad("fc.bias");
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn network_gradients_match_finite_differences() {
    let report = gradcheck::network_suite();
    assert!(report.all_passed(), "\n{}", report.summary());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let spec = small_spec();
    let (_, ps) = build_network::<f32>(&spec, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.stpp");
    ps.save(&path).unwrap();

    let (_, mut loaded) = build_network::<f32>(&spec, 99).unwrap();
    loaded.load(&path).unwrap();
    for (name, p) in ps.iter() {
        let l = loaded.get(name);
        assert!(p.value.iter().zip(l.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
    }

    // byte-level round trip
    let path2 = dir.path().join("net2.stpp");
    loaded.save(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

    // container API with an extra array
    let extra = ndarray::ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0f32, 2.0, 3.0]).unwrap();
    let path3 = dir.path().join("extra.stpp");
    write_container(&path3, &[("meta/steps".into(), &extra)]).unwrap();
    let back = read_container(&path3).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].0, "meta/steps");
    assert_eq!(back[0].1, extra);
}

#[test]
fn bad_checkpoint_bytes_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.stpp");
    std::fs::write(&path, b"NOPE").unwrap();
    assert!(read_container(&path).is_err());
    std::fs::write(&path, b"STPP\x01\x00\x00\x00\xff\x00\x00\x00short").unwrap();
    assert!(read_container(&path).is_err());
}

#[test]
fn eval_forward_takes_shared_reference_and_never_mutates() {
    // read-only audit: hash of checkpoint bytes before/after
    let spec = small_spec();
    let (net, ps) = build_network::<f32>(&spec, 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let before = dir.path().join("before.stpp");
    ps.save(&before).unwrap();
    let x = Array4::<f32>::from_elem((2, 3, 8, 8), 0.1);
    let mask = DepthMask::new(vec![1, 2], &spec).unwrap();
    let _ = net.forward(&ps, &mask, &x, Mode::Eval).unwrap();
    let _ = net.forward(&ps, &mask, &x, Mode::Train).unwrap();
    let after = dir.path().join("after.stpp");
    ps.save(&after).unwrap();
    assert_eq!(std::fs::read(before).unwrap(), std::fs::read(after).unwrap());
}
