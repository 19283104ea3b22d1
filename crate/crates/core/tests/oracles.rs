//! Brute-force loop oracles for the vectorised kernels.

mod common;

use common::{rng, uniform, uniform_f32};
use kws_core::gcn::{gaussian_affinity, NodeFeatureSet, NonLocalGcn};
use kws_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [b, cin, h, wd] = x.shape().try_into().unwrap();
    let [cout, _, k, _] = w.shape().try_into().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let y = (i * stride + u) as isize - pad as isize;
                                let z = (j * stride + v) as isize - pad as isize;
                                if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * cin + c) * h + y as usize) * wd + z as usize;
                                let wi = ((o * cin + c) * k + u) * k + v;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((n * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (vec![b, cout, ho, wo], out)
}

fn naive_pool(x: &Tensor<f64>, k: usize, stride: usize) -> (Vec<usize>, Vec<f64>) {
    let [b, c, h, w] = x.shape().try_into().unwrap();
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::new();
    for n in 0..b {
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            s += x.data()[((n * c + ch) * h + i * stride + u) * w + j * stride + v];
                        }
                    }
                    out.push(s / (k * k) as f64);
                }
            }
        }
    }
    (vec![b, c, ho, wo], out)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let wv = g.leaf(w);
    let y = g.conv2d(xv, wv, stride, pad).unwrap();
    (g.shape(y).to_vec(), g.value(y).to_vec())
}

#[test]
fn conv2d_matches_loops() {
    for seed in 0..150 {
        let mut r = rng(seed);
        let k = [1, 3, 5][r.gen_range(0..3)];
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=k / 2);
        let shape = [
            r.gen_range(1..=3),
            r.gen_range(1..=4),
            r.gen_range(k..=9),
            r.gen_range(k..=9),
        ];
        let x = uniform(&mut r, &shape);
        let cout = r.gen_range(1..=4);
        let w = uniform(&mut r, &[cout, shape[1], k, k]);
        let (s1, v1) = run_conv(&x, &w, stride, pad);
        let (s2, v2) = naive_conv(&x, &w, stride, pad);
        assert_eq!(s1, s2, "seed {seed}");
        assert!(max_abs_diff(&v1, &v2) < 1e-12, "seed {seed}");
    }
}

#[test]
fn avgpool_matches_loops() {
    for seed in 0..150 {
        let mut r = rng(seed);
        let k = r.gen_range(1..=3);
        let stride = r.gen_range(1..=3);
        let shape = [
            r.gen_range(1..=3),
            r.gen_range(1..=4),
            r.gen_range(k..=9),
            r.gen_range(k..=9),
        ];
        let x = uniform(&mut r, &shape);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let y = g.avgpool2d(xv, k, stride).unwrap();
        let (s, v) = naive_pool(&x, k, stride);
        assert_eq!(g.shape(y), s.as_slice(), "seed {seed}");
        assert!(max_abs_diff(g.value(y), &v) < 1e-12, "seed {seed}");
    }
}

/// Loop form of the embedded-Gaussian affinity.
fn affinity_oracle(x: &[f64], n: usize, c: usize, wt: &Tensor<f64>, wp: &Tensor<f64>) -> Vec<f64> {
    let e = wt.shape()[0];
    let embed = |w: &Tensor<f64>, i: usize| -> Vec<f64> {
        (0..e)
            .map(|k| (0..c).map(|ch| w.data()[k * c + ch] * x[i * c + ch]).sum())
            .collect()
    };
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let ti = embed(wt, i);
        let logits: Vec<f64> = (0..n)
            .map(|j| ti.iter().zip(embed(wp, j)).map(|(p, q)| p * q).sum())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..n {
            a[i * n + j] = (logits[j] - m).exp() / z;
        }
    }
    a
}

/// Per-node update: `x̃_i = ReLU( Σ_j A_ij x_j W )`, one node at a time.
fn node_update_oracle(x: &[f64], n: usize, c: usize, a: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let mut agg = vec![0.0; c];
        for j in 0..n {
            for ch in 0..c {
                agg[ch] += a[i * n + j] * x[j * c + ch];
            }
        }
        for o in 0..c {
            let v: f64 = (0..c).map(|ch| agg[ch] * w.data()[ch * c + o]).sum();
            out[i * c + o] = v.max(0.0);
        }
    }
    out
}

fn random_module(r: &mut impl Rng, c: usize, gamma: f64) -> NonLocalGcn<f64> {
    NonLocalGcn::from_weights(
        uniform(r, &[c / 4, c]),
        uniform(r, &[c / 4, c]),
        uniform(r, &[c, c]),
        gamma,
    )
    .unwrap()
}

#[test]
fn non_local_aggregation_matches_node_oracle() {
    for seed in 0..120 {
        let mut r = rng(seed);
        let c = 4 * r.gen_range(1..=4);
        let n = r.gen_range(1..=64);
        let gamma = r.gen_range(-1.0..1.0);
        let m = random_module(&mut r, c, gamma);
        let x = uniform(&mut r, &[n, c]).into_data();
        let nodes = NodeFeatureSet::from_rows(x.clone(), n, c).unwrap();

        let a = affinity_oracle(&x, n, c, &m.w_theta.tensor, &m.w_phi.tensor);
        assert!(
            max_abs_diff(m.affinity(&nodes).unwrap().data(), &a) < 1e-12,
            "affinity, seed {seed}"
        );

        let msg = node_update_oracle(&x, n, c, &a, &m.w.tensor);
        assert!(
            max_abs_diff(m.message_pass(&nodes).unwrap().data(), &msg) < 1e-5,
            "message, seed {seed}"
        );

        let aug: Vec<f64> = msg.iter().zip(&x).map(|(t, v)| gamma * t + v).collect();
        assert!(
            max_abs_diff(m.augment(&nodes).unwrap().data(), &aug) < 1e-5,
            "augment, seed {seed}"
        );
    }
}

#[test]
fn plain_gaussian_affinity_matches_loops() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let (n, c) = (r.gen_range(1..=40), r.gen_range(1..=6));
        let x = uniform(&mut r, &[n, c]).into_data();
        let a = gaussian_affinity(&NodeFeatureSet::from_rows(x.clone(), n, c).unwrap()).unwrap();
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..c).map(|k| x[i * c + k] * x[j * c + k]).sum())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                assert!((a.data()[i * n + j] - l.exp() / z).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn affinity_rows_are_stochastic_in_f32() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let c = 4 * r.gen_range(1..=16);
        let n = r.gen_range(1..=64);
        let scale = r.gen_range(0.1f32..4.0);
        let m = NonLocalGcn::<f32>::from_weights(
            uniform_f32(&mut r, &[c / 4, c]).map(|v| v * scale),
            uniform_f32(&mut r, &[c / 4, c]).map(|v| v * scale),
            uniform_f32(&mut r, &[c, c]),
            0.0,
        )
        .unwrap();
        let x = uniform_f32(&mut r, &[n, c]).into_data();
        let a = m.affinity(&NodeFeatureSet::from_rows(x, n, c).unwrap()).unwrap();
        for row in a.data().chunks(n) {
            assert!(row.iter().all(|v| *v > 0.0 || n > 1 && *v >= 0.0));
            let s: f64 = row.iter().map(|v| *v as f64).sum();
            assert!((s - 1.0).abs() <= 1e-6, "row sum {s} (seed {seed})");
        }
    }
}

#[test]
fn permutation_equivariance() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let c = 4 * r.gen_range(1..=8);
        let n = r.gen_range(2..=64);
        let m = NonLocalGcn::<f32>::from_weights(
            uniform_f32(&mut r, &[c / 4, c]),
            uniform_f32(&mut r, &[c / 4, c]),
            uniform_f32(&mut r, &[c, c]),
            r.gen_range(-1.0..1.0),
        )
        .unwrap();
        let x = uniform_f32(&mut r, &[n, c]).into_data();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let px: Vec<f32> = perm.iter().flat_map(|&p| x[p * c..(p + 1) * c].to_vec()).collect();
        let set = NodeFeatureSet::from_rows(x, n, c).unwrap();
        let pset = NodeFeatureSet::from_rows(px, n, c).unwrap();

        let a = m.affinity(&set).unwrap();
        let pa = m.affinity(&pset).unwrap();
        for i in 0..n {
            for j in 0..n {
                let d = (pa.data()[i * n + j] - a.data()[perm[i] * n + perm[j]]).abs();
                assert!(d < 1e-5, "affinity ({i},{j}) seed {seed}");
            }
        }
        for (out, pout) in [
            (
                m.message_pass(&set).unwrap().into_data(),
                m.message_pass(&pset).unwrap().into_data(),
            ),
            (
                m.augment(&set).unwrap().data().to_vec(),
                m.augment(&pset).unwrap().data().to_vec(),
            ),
        ] {
            for (i, &p) in perm.iter().enumerate() {
                for ch in 0..c {
                    let d = (pout[i * c + ch] - out[p * c + ch]).abs();
                    assert!(d < 1e-5, "node {i} channel {ch} seed {seed}: {d}");
                }
            }
        }
    }
}

#[test]
fn feature_map_node_round_trip() {
    let mut r = rng(7);
    let map = uniform(&mut r, &[5, 3, 4]);
    let nodes = NodeFeatureSet::from_feature_map(&map).unwrap();
    assert_eq!((nodes.len(), nodes.channels(), nodes.grid()), (12, 5, (3, 4)));
    // node (1, 2) holds channel values at that pixel
    for c in 0..5 {
        assert_eq!(nodes.row(6)[c], map.data()[c * 12 + 6]);
    }
    assert_eq!(nodes.to_feature_map(), map);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_input(seed in 0u64..10_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut r = rng(seed);
        let k = [1, 3][r.gen_range(0..2)];
        let shape = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(k..=6), r.gen_range(k..=6)];
        let a = uniform(&mut r, &shape);
        let b = uniform(&mut r, &shape);
        let w = uniform(&mut r, &[2, shape[1], k, k]);
        let mix = Tensor::new(
            shape.to_vec(),
            a.data().iter().zip(b.data()).map(|(p, q)| alpha * p + beta * q).collect(),
        )
        .unwrap();
        let (_, ya) = run_conv(&a, &w, 1, k / 2);
        let (_, yb) = run_conv(&b, &w, 1, k / 2);
        let (_, ym) = run_conv(&mix, &w, 1, k / 2);
        for i in 0..ym.len() {
            prop_assert!((ym[i] - alpha * ya[i] - beta * yb[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn pool_preserves_constants(v in -10.0f64..10.0, k in 1usize..4, h in 4usize..8) {
        let x = Tensor::full(vec![1, 2, h, h], v);
        let (_, y) = naive_pool(&x, k, k);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let out = g.avgpool2d(xv, k, k).unwrap();
        prop_assert!(g.value(out).iter().all(|o| (o - v).abs() < 1e-12));
        prop_assert!(y.iter().all(|o| (o - v).abs() < 1e-12));
    }
}
