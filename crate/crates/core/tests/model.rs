mod common;

use std::collections::HashMap;

use common::{rng, uniform_f32};
use kws_core::model::{
    BlockKind, BlockSpec, CENet, Mode, ModelConfig, ResidualBlock, Session, TapPoint, Variant, N_CLASSES,
};
use kws_core::tensor::{conv_out_size, Graph, Tensor};
use rand::Rng;

fn input(b: usize, seed: u64) -> Tensor<f32> {
    uniform_f32(&mut rng(seed), &[b, 1, 101, 40])
}

/// `(kernel, in, out)` for every branch conv, written out from the architecture table.
fn table_triples(repeats: [usize; 3]) -> Vec<(usize, usize, usize)> {
    let stage = |c: usize, w: usize, out: usize, r: usize| {
        let mut v = Vec::new();
        for _ in 0..r {
            v.extend([(1, c, w), (3, w, w), (1, w, c)]);
        }
        v.extend([(1, c, w), (3, w, w), (1, w, out)]);
        v
    };
    let mut t = vec![(3, 1, 16)];
    t.extend(stage(16, 8, 32, repeats[0]));
    t.extend(stage(32, 8, 48, repeats[1]));
    t.extend(stage(48, 12, 64, repeats[2]));
    t
}

#[test]
fn built_convs_reproduce_the_table() {
    for (variant, repeats) in [
        (Variant::Cenet6, [1, 1, 1]),
        (Variant::Cenet24, [7, 7, 7]),
        (Variant::Cenet40, [15, 15, 7]),
    ] {
        assert_eq!(variant.repeats(), repeats);
        let m = CENet::<f32>::build(&ModelConfig::new(variant), 0).unwrap();
        let mut got = vec![(
            m.initial_conv.kernel,
            m.initial_conv.in_channels,
            m.initial_conv.out_channels,
        )];
        for stage in &m.stages {
            for b in &stage.blocks {
                for c in [&b.reduce, &b.spatial, &b.restore] {
                    got.push((c.kernel, c.in_channels, c.out_channels));
                }
            }
        }
        assert_eq!(got, table_triples(repeats), "{variant}");
        let per_stage: Vec<usize> = m.stages.iter().map(|s| s.blocks.len()).collect();
        assert_eq!(per_stage, repeats.map(|r| r + 1).to_vec());
    }
}

#[test]
fn connection_blocks_stride_and_project() {
    let m = CENet::<f32>::build(&ModelConfig::new(Variant::Cenet24), 3).unwrap();
    for stage in &m.stages {
        let (last, body) = stage.blocks.split_last().unwrap();
        assert_eq!(last.spec.kind, BlockKind::Connection);
        assert_eq!(
            (last.spatial.stride, last.reduce.stride, last.restore.stride),
            (2, 1, 1)
        );
        let p = last.shortcut.as_ref().unwrap();
        assert_eq!((p.conv.kernel, p.conv.stride), (1, 2));
        for b in body {
            assert_eq!(b.spec.kind, BlockKind::Bottleneck);
            assert!(b.shortcut.is_none());
            assert_eq!(b.in_channels(), b.out_channels());
        }
    }
}

#[test]
fn logits_shape_for_every_variant() {
    for v in Variant::ALL {
        let m = CENet::<f32>::build(&ModelConfig::new(v), 1).unwrap();
        let out = m.logits(&input(2, 5)).unwrap();
        assert_eq!(out.shape(), [2, N_CLASSES]);
        assert!(out.is_finite());
    }
    let m = CENet::<f32>::build(&ModelConfig::new(Variant::Cenet6), 1).unwrap();
    assert_eq!(m.logits(&input(1, 2)).unwrap().shape(), [1, 12]);
    assert!(m.logits(&Tensor::zeros(vec![3, 1, 101, 40])).unwrap().is_finite());
    assert!(m.logits(&Tensor::zeros(vec![1, 1, 100, 40])).is_err());
    assert!(m.logits(&Tensor::zeros(vec![1, 2, 101, 40])).is_err());
}

#[test]
fn spatial_trace() {
    let mut h = (101usize, 40usize);
    h = (h.0 / 2, h.1 / 2);
    let mut want = Vec::new();
    for _ in 0..3 {
        h = (
            conv_out_size(h.0, 3, 2, 1).unwrap(),
            conv_out_size(h.1, 3, 2, 1).unwrap(),
        );
        want.push(h);
    }
    assert_eq!(want, [(25, 10), (13, 5), (7, 3)]);

    let m = CENet::<f32>::build(&ModelConfig::new(Variant::Cenet6).with_gcn(&[1, 2, 3]), 0).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(&input(1, 0));
    let mut s = Session::new(&mut g, Mode::Infer);
    m.forward(&mut s, x).unwrap();
    let rec = s.finish();
    let channels = [32, 48, 64];
    for tap in &rec.taps {
        let (hh, ww) = want[tap.stage - 1];
        assert_eq!(g.shape(tap.var), [1, channels[tap.stage - 1], hh, ww]);
    }
    assert_eq!(rec.taps.iter().filter(|t| t.point == TapPoint::Augmented).count(), 3);
}

fn zero_branch(b: &mut ResidualBlock<f32>) {
    for c in [&mut b.reduce, &mut b.spatial, &mut b.restore] {
        c.weight.tensor.data_mut().fill(0.0);
    }
}

fn run_block(b: &ResidualBlock<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let mut s = Session::new(&mut g, Mode::Infer);
    let y = b.forward(&mut s, xv).unwrap();
    g.tensor(y)
}

#[test]
fn zeroed_bottleneck_is_identity_on_nonnegative_input() {
    let mut b = ResidualBlock::<f32>::standalone(BlockSpec::bottleneck(16, 8), 4).unwrap();
    zero_branch(&mut b);
    let x = uniform_f32(&mut rng(1), &[2, 16, 6, 5]).map(f32::abs);
    assert_eq!(run_block(&b, &x), x);
    // a live branch changes the output but keeps the shape
    let live = ResidualBlock::<f32>::standalone(BlockSpec::bottleneck(16, 8), 4).unwrap();
    let y = run_block(&live, &x);
    assert_eq!(y.shape(), x.shape());
    assert_ne!(y, x);
}

#[test]
fn zeroed_connection_is_projected_shortcut() {
    let mut b = ResidualBlock::<f32>::standalone(BlockSpec::connection(16, 8, 32), 9).unwrap();
    zero_branch(&mut b);
    let x = uniform_f32(&mut rng(2), &[1, 16, 25, 10]);
    let y = run_block(&b, &x);
    assert_eq!(y.shape(), [1, 32, 13, 5]);

    let p = b.shortcut.as_ref().unwrap();
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let w = g.leaf(&p.conv.weight.tensor);
    let h = g.conv2d(xv, w, 2, 0).unwrap();
    let gamma = g.leaf(&p.bn.gamma.tensor);
    let beta = g.leaf(&p.bn.beta.tensor);
    let h = g
        .batch_norm_infer(h, gamma, beta, &p.bn.running_mean, &p.bn.running_var, p.bn.eps)
        .unwrap();
    let h = g.relu(h).unwrap();
    assert_eq!(g.value(h), y.data());
}

#[test]
fn block_rejects_channel_mismatch() {
    let b = ResidualBlock::<f32>::standalone(BlockSpec::bottleneck(16, 8), 0).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::zeros(vec![1, 8, 4, 4]));
    let mut s = Session::new(&mut g, Mode::Infer);
    assert!(b.forward(&mut s, x).is_err());
}

#[test]
fn infer_logits_do_not_depend_on_batch() {
    let mut m = CENet::<f32>::build(&ModelConfig::new(Variant::Cenet6).with_gcn(&[2]), 6).unwrap();
    // move the running statistics off their initial values
    let mut g = Graph::new();
    let x = g.leaf(&input(4, 11));
    let mut s = Session::new(&mut g, Mode::Train);
    m.forward(&mut s, x).unwrap();
    let rec = s.finish();
    m.apply_norm_updates(&rec);
    for (_, gcn) in m.gcn_modules_mut() {
        gcn.set_gamma(0.7);
    }

    let batch = input(3, 12);
    let all = m.logits(&batch).unwrap();
    for i in 0..3 {
        let one = Tensor::new(vec![1, 1, 101, 40], batch.data()[i * 4040..(i + 1) * 4040].to_vec()).unwrap();
        let single = m.logits(&one).unwrap();
        for k in 0..12 {
            assert!((single.data()[k] - all.data()[i * 12 + k]).abs() < 1e-5);
        }
    }
    let twin = Tensor::new(
        vec![2, 1, 101, 40],
        [&batch.data()[..4040], &batch.data()[..4040]].concat(),
    )
    .unwrap();
    let out = m.logits(&twin).unwrap();
    assert_eq!(out.data()[..12], out.data()[12..]);
}

#[test]
fn zero_gamma_insertion_is_bit_identical() {
    for v in [Variant::Cenet6, Variant::Cenet24] {
        let base = CENet::<f32>::build(&ModelConfig::new(v), 21).unwrap();
        let x = input(2, 3);
        let before = base.logits(&x).unwrap();
        let withg = base.clone().insert_gcn(&[1, 2, 3]).unwrap();
        assert_eq!(withg.gcn_modules().len(), 3);
        assert!(withg.gcn_modules().iter().all(|(_, g)| g.gamma_value() == 0.0));
        let after = withg.logits(&x).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before), bits(&after));
    }
    let base = CENet::<f32>::build(&ModelConfig::new(Variant::Cenet6), 0).unwrap();
    let n = base.num_params();
    assert_eq!(base.insert_gcn(&[]).unwrap().num_params(), n);
}

#[test]
fn gcn_does_not_disturb_base_initialisation() {
    let a = CENet::<f32>::build(&ModelConfig::new(Variant::Cenet6), 8).unwrap();
    let b = CENet::<f32>::build(&ModelConfig::new(Variant::Cenet6).with_gcn(&[1, 3]), 8).unwrap();
    let pa: HashMap<_, _> = a.state().into_iter().collect();
    for (name, t) in b.state() {
        if let Some(base) = pa.get(&name) {
            assert_eq!(base, &t, "{name}");
        } else {
            assert!(name.contains("gcn"), "{name}");
        }
    }
    assert!(CENet::<f32>::build(&ModelConfig::new(Variant::Cenet6), 0)
        .unwrap()
        .insert_gcn(&[0])
        .is_err());
    assert!(CENet::<f32>::build(&ModelConfig::new(Variant::Cenet6), 0)
        .unwrap()
        .insert_gcn(&[4])
        .is_err());
}

#[test]
fn build_is_deterministic_and_state_round_trips() {
    let cfg = ModelConfig::new(Variant::Cenet6).with_gcn(&[1]);
    let a = CENet::<f32>::build(&cfg, 77).unwrap();
    let b = CENet::<f32>::build(&cfg, 77).unwrap();
    assert_eq!(a.state(), b.state());
    let c = CENet::<f32>::build(&cfg, 78).unwrap();
    assert_ne!(a.state(), c.state());

    let mut d = CENet::<f32>::build(&cfg, 78).unwrap();
    d.load_state(&a.state().into_iter().collect()).unwrap();
    let x = input(1, 4);
    assert_eq!(a.logits(&x).unwrap(), d.logits(&x).unwrap());

    let mut partial: HashMap<_, _> = a.state().into_iter().collect();
    partial.remove("classifier.weight");
    assert!(d.load_state(&partial).is_err());
}

#[test]
fn parameter_order_is_stable() {
    let m = CENet::<f32>::build(&ModelConfig::new(Variant::Cenet24).with_gcn(&[2]), 0).unwrap();
    let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
    let again: Vec<String> = m.clone().params().iter().map(|p| p.name.clone()).collect();
    assert_eq!(names, again);
    assert_eq!(names.first().map(String::as_str), Some("initial.conv.weight"));
    assert!(names.iter().any(|n| n == "stage2.gcn.w"));
}

#[test]
fn train_mode_updates_running_stats() {
    let mut m = CENet::<f32>::build(&ModelConfig::new(Variant::Cenet6), 0).unwrap();
    let before = m.initial_bn.running_mean.clone();
    let mut g = Graph::new();
    let mut x = input(2, 1);
    for v in x.data_mut() {
        *v += 3.0 + rng(0).gen_range(0.0..0.1);
    }
    let xv = g.leaf(&x);
    let mut s = Session::new(&mut g, Mode::Train);
    m.forward(&mut s, xv).unwrap();
    let rec = s.finish();
    assert_eq!(m.initial_bn.running_mean, before);
    m.apply_norm_updates(&rec);
    assert_ne!(m.initial_bn.running_mean, before);
}
