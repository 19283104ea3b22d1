mod common;

use common::{rng, uniform_f32};
use kws_core::eval::{
    accuracy, channel_mean, frr_at, keyword_rocs, roc_csv, roc_for_keyword, stage_feature_map, vertical_average,
    Predictions, RocCurve,
};
use kws_core::model::{CENet, ModelConfig, TapPoint, Variant};
use kws_core::tensor::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_scores(r: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    let quantize = r.gen_bool(0.5);
    let mut scores = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for i in 0..n {
        let t = i == 0 || (i != 1 && r.gen_bool(0.3));
        let mut s: f64 = if t {
            r.gen_range(0.2..1.0)
        } else {
            r.gen_range(0.0..0.8)
        };
        if quantize {
            // land exactly on grid points to exercise ties
            s = (s * 100.0).round() / 100.0;
        }
        scores.push(s);
        target.push(t);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(r);
    (
        idx.iter().map(|&i| scores[i]).collect(),
        idx.iter().map(|&i| target[i]).collect(),
    )
}

#[test]
fn roc_equals_brute_force() {
    for seed in 0..150 {
        let mut r = rng(seed);
        let n = r.gen_range(2..=1000);
        let t = [2, 11, 51, 101][r.gen_range(0..4)];
        let (scores, target) = random_scores(&mut r, n);
        let curve = roc_for_keyword("k", &scores, &target, t).unwrap();
        assert_eq!(curve.points.len(), t);
        let nt = target.iter().filter(|x| **x).count() as f64;
        let nn = n as f64 - nt;
        for (k, p) in curve.points.iter().enumerate() {
            let tau = k as f64 / (t - 1) as f64;
            let mut fa = 0usize;
            let mut fr = 0usize;
            for (s, is_t) in scores.iter().zip(&target) {
                if *is_t && *s < tau {
                    fr += 1;
                }
                if !*is_t && *s >= tau {
                    fa += 1;
                }
            }
            assert_eq!(p.threshold, tau);
            assert_eq!(p.far, fa as f64 / nn, "seed {seed} τ {tau}");
            assert_eq!(p.frr, fr as f64 / nt, "seed {seed} τ {tau}");
        }
        let auc: f64 = curve
            .points
            .windows(2)
            .map(|w| (w[0].far - w[1].far).abs() * (w[0].frr + w[1].frr) / 2.0)
            .sum();
        assert_eq!(curve.auc, auc);
    }
}

#[test]
fn separable_scores() {
    let scores = [0.95, 0.9, 0.85, 0.1, 0.2, 0.3];
    let target = [true, true, true, false, false, false];
    let c = roc_for_keyword("yes", &scores, &target, 101).unwrap();
    assert_eq!((c.points[0].far, c.points[0].frr), (1.0, 0.0));
    assert!(c.points.iter().any(|p| p.far == 0.0 && p.frr == 0.0));
    assert!(c.auc < 1e-12);
    assert!(roc_for_keyword("yes", &scores, &[false; 6], 101).is_err());
    assert!(roc_for_keyword("yes", &scores[..2], &target, 101).is_err());
    assert!(roc_for_keyword("yes", &[f64::NAN, 0.1], &[true, false], 101).is_err());
}

fn curve(seed: u64, n: usize) -> RocCurve {
    let mut r = rng(seed);
    let (s, t) = random_scores(&mut r, n);
    roc_for_keyword("k", &s, &t, 101).unwrap()
}

/// Interpolated FRR at `x` written against the raw points.
fn frr_oracle(c: &RocCurve, x: f64) -> f64 {
    let mut best: Vec<(f64, f64)> = Vec::new();
    for p in &c.points {
        match best.iter_mut().find(|(f, _)| *f == p.far) {
            Some(e) => e.1 = e.1.min(p.frr),
            None => best.push((p.far, p.frr)),
        }
    }
    best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if x <= best[0].0 {
        return best[0].1;
    }
    if x >= best[best.len() - 1].0 {
        return best[best.len() - 1].1;
    }
    for w in best.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 <= x && x <= x1 {
            return if x == x0 {
                y0
            } else {
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            };
        }
    }
    unreachable!()
}

#[test]
fn vertical_average_is_pointwise_mean() {
    let one = curve(1, 300);
    let same = vertical_average(&[one.clone(), one.clone()]).unwrap();
    assert_eq!(same, vertical_average(std::slice::from_ref(&one)).unwrap());
    for p in &same.points {
        assert_eq!(p.far, 1.0 - p.threshold);
        assert!((p.frr - frr_oracle(&one, p.far)).abs() < 1e-12);
    }

    let curves: Vec<RocCurve> = (0..10).map(|s| curve(s + 10, 200 + 20 * s as usize)).collect();
    let avg = vertical_average(&curves).unwrap();
    assert_eq!(avg.keyword, "overall");
    for p in &avg.points {
        let mean = curves.iter().map(|c| frr_oracle(c, p.far)).sum::<f64>() / 10.0;
        assert!((p.frr - mean).abs() < 1e-12);
        assert!((p.frr - curves.iter().map(|c| frr_at(c, p.far)).sum::<f64>() / 10.0).abs() < 1e-15);
    }
    assert!(vertical_average(&[]).is_err());
    let coarse = roc_for_keyword("k", &[0.1, 0.9], &[false, true], 11).unwrap();
    assert!(vertical_average(&[one, coarse]).is_err());
}

#[test]
fn accuracy_matches_count() {
    let mut r = rng(3);
    let logits = uniform_f32(&mut r, &[200, 12]);
    let labels: Vec<usize> = (0..200).map(|_| r.gen_range(0..12)).collect();
    let mut hits = 0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data()[i * 12..(i + 1) * 12];
        if (0..12).all(|j| row[j] <= row[l]) {
            hits += 1;
        }
    }
    let acc = accuracy(&logits, &labels).unwrap();
    assert_eq!(acc, hits as f64 / 200.0);

    let mut order: Vec<usize> = (0..200).collect();
    order.shuffle(&mut r);
    let shuffled = Tensor::new(
        vec![200, 12],
        order
            .iter()
            .flat_map(|&i| logits.data()[i * 12..(i + 1) * 12].to_vec())
            .collect(),
    )
    .unwrap();
    let shuffled_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    assert_eq!(accuracy(&shuffled, &shuffled_labels).unwrap(), acc);

    let eye = Tensor::new(vec![3, 3], vec![1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(accuracy(&eye, &[0, 1, 2]).unwrap(), 1.0);
    assert_eq!(accuracy(&eye, &[1, 2, 0]).unwrap(), 0.0);
}

#[test]
fn keyword_curves_and_csv() {
    let mut r = rng(4);
    let n = 120;
    let labels: Vec<usize> = (0..n).map(|i| i % 12).collect();
    let mut probs = Vec::new();
    for _ in 0..n {
        let row: Vec<f64> = (0..12).map(|_| r.gen_range(0.0..1.0)).collect();
        let z: f64 = row.iter().sum();
        probs.extend(row.into_iter().map(|v| v / z));
    }
    let preds = Predictions {
        classes: 12,
        probs,
        labels,
    };
    let curves = keyword_rocs(&preds, 101).unwrap();
    assert_eq!(curves.len(), 11);
    assert_eq!(curves[0].keyword, "yes");
    assert_eq!(curves.last().unwrap().keyword, "overall");
    let csv = roc_csv(&curves);
    assert_eq!(csv.lines().next(), Some("keyword,threshold,far,frr"));
    assert_eq!(csv.lines().count(), 1 + 11 * 101);
}

#[test]
fn channel_mean_matches_loops() {
    let mut r = rng(8);
    let (c, h, w) = (5, 4, 3);
    let map = uniform_f32(&mut r, &[c, h, w]);
    let g = channel_mean(map.data(), c, h, w);
    assert_eq!((g.rows, g.cols), (h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0f64;
            for ch in 0..c {
                s += f64::from(map.data()[(ch * h + i) * w + j]);
            }
            assert!((g.get(i, j) - s / c as f64).abs() < 1e-12);
        }
    }
    assert_eq!(g.to_csv().lines().count(), h);
}

#[test]
fn stage_maps_before_and_after_the_graph_module() {
    let m = CENet::<f32>::build(&ModelConfig::new(Variant::Cenet6).with_gcn(&[1]), 2).unwrap();
    let x = uniform_f32(&mut rng(5), &[1, 1, 101, 40]);
    let pre = stage_feature_map(&m, &x, 1, TapPoint::StageOutput).unwrap();
    let post = stage_feature_map(&m, &x, 1, TapPoint::Augmented).unwrap();
    assert_eq!((pre.rows, pre.cols), (25, 10));
    assert_eq!(pre, post);
    assert_eq!(stage_feature_map(&m, &x, 3, TapPoint::StageOutput).unwrap().rows, 7);
    assert!(stage_feature_map(&m, &x, 2, TapPoint::Augmented).is_err());
    assert!(stage_feature_map(&m, &x, 4, TapPoint::StageOutput).is_err());

    let mut live = m.clone();
    for (_, g) in live.gcn_modules_mut() {
        g.set_gamma(1.0);
    }
    assert_ne!(stage_feature_map(&live, &x, 1, TapPoint::Augmented).unwrap(), pre);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn roc_is_monotone(seed in 0u64..100_000, n in 2usize..400, t in 2usize..102) {
        let mut r = rng(seed);
        let (s, tg) = random_scores(&mut r, n);
        let c = roc_for_keyword("k", &s, &tg, t).unwrap();
        for w in c.points.windows(2) {
            prop_assert!(w[1].threshold > w[0].threshold);
            prop_assert!(w[1].far <= w[0].far);
            prop_assert!(w[1].frr >= w[0].frr);
        }
        for p in &c.points {
            prop_assert!((0.0..=1.0).contains(&p.far) && (0.0..=1.0).contains(&p.frr));
        }
        prop_assert_eq!((c.points[0].far, c.points[0].frr), (1.0, 0.0));
        prop_assert!((0.0..=1.0).contains(&c.auc));
    }
}
