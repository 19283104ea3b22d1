//! Accuracy, keyword ROC curves and stage feature maps.

use std::fmt::Write as _;

use crate::dataset::{Example, KEYWORDS};
use crate::error::{Error, Result};
use crate::frontend::{AudioClip, Frontend};
use crate::model::{CENet, Mode, Session, TapPoint};
use crate::tensor::{Graph, Real, Tensor};
use crate::trainer::features_tensor;

pub const DEFAULT_THRESHOLDS: usize = 101;

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits: [B, C]` whose argmax equals the label.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("logits {s:?} for {} labels", labels.len())));
    }
    let hits = logits
        .data()
        .chunks(s[1])
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Row-wise softmax in f64.
pub fn softmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}

/// Posteriors and labels of an evaluated split.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub classes: usize,
    /// `[n, classes]` softmax posteriors.
    pub probs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn accuracy(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        let hits = self
            .probs
            .chunks(self.classes)
            .zip(&self.labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        hits as f64 / self.labels.len() as f64
    }

    /// Posterior of class `k` for every sample.
    pub fn scores(&self, k: usize) -> Vec<f64> {
        self.probs.chunks(self.classes).map(|r| r[k]).collect()
    }
}

/// Infer-mode posteriors for `examples`, in order.
pub fn predict(
    model: &CENet<f32>,
    examples: &[Example],
    noise: &[AudioClip],
    frontend: &Frontend,
    batch_size: usize,
) -> Result<Predictions> {
    let classes = model.config().n_classes;
    let mut probs = Vec::with_capacity(examples.len() * classes);
    let mut labels = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let clips = chunk.iter().map(|e| e.load(noise)).collect::<Result<Vec<_>>>()?;
        let x = features_tensor(frontend, &clips)?;
        let logits = model.logits(&x)?;
        probs.extend(softmax_rows(logits.data(), classes));
        labels.extend(chunk.iter().map(|e| e.label));
    }
    Ok(Predictions { classes, probs, labels })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub keyword: String,
    /// Ordered by increasing threshold.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// `n` evenly spaced thresholds covering `[0, 1]` inclusive.
pub fn threshold_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 thresholds, got {n}")));
    }
    Ok((0..n).map(|k| k as f64 / (n - 1) as f64).collect())
}

/// Trapezoid area under the (FAR, FRR) polyline.
pub fn polyline_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|p| (p[0].far - p[1].far).abs() * (p[0].frr + p[1].frr) / 2.0)
        .sum()
}

/// FAR counts non-targets with `score >= τ`; FRR counts targets with `score < τ`.
pub fn roc_for_keyword(keyword: &str, scores: &[f64], is_target: &[bool], n_thresholds: usize) -> Result<RocCurve> {
    if scores.len() != is_target.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} target flags",
            scores.len(),
            is_target.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc scores"));
    }
    let mut targets: Vec<f64> = scores
        .iter()
        .zip(is_target)
        .filter(|(_, &t)| t)
        .map(|(s, _)| *s)
        .collect();
    let mut others: Vec<f64> = scores
        .iter()
        .zip(is_target)
        .filter(|(_, &t)| !t)
        .map(|(s, _)| *s)
        .collect();
    if targets.is_empty() || others.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "roc for `{keyword}` needs targets and non-targets ({} / {})",
            targets.len(),
            others.len()
        )));
    }
    targets.sort_by(f64::total_cmp);
    others.sort_by(f64::total_cmp);
    let points: Vec<RocPoint> = threshold_grid(n_thresholds)?
        .into_iter()
        .map(|tau| {
            let below_nt = others.partition_point(|&s| s < tau);
            let below_t = targets.partition_point(|&s| s < tau);
            RocPoint {
                threshold: tau,
                far: (others.len() - below_nt) as f64 / others.len() as f64,
                frr: below_t as f64 / targets.len() as f64,
            }
        })
        .collect();
    Ok(RocCurve {
        keyword: keyword.to_string(),
        auc: polyline_area(&points),
        points,
    })
}

/// FRR of `curve` at false-alarm rate `x`: linear between distinct FAR
/// values (best FRR where FAR repeats), clamped at the ends.
pub fn frr_at(curve: &RocCurve, x: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.far, p.frr)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup_by(|b, a| a.0 == b.0);
    if x <= pts[0].0 {
        return pts[0].1;
    }
    let last = pts[pts.len() - 1];
    if x >= last.0 {
        return last.1;
    }
    let i = pts.partition_point(|p| p.0 <= x);
    let (x0, y0) = pts[i - 1];
    let (x1, y1) = pts[i];
    if x == x0 {
        return y0;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Mean FRR across curves at FAR = 1 - τ for every τ of the shared grid.
pub fn vertical_average(curves: &[RocCurve]) -> Result<RocCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InvalidArgument("no curves to average".into()))?;
    let grid: Vec<f64> = first.points.iter().map(|p| p.threshold).collect();
    for c in curves {
        if c.points.len() != grid.len() || c.points.iter().zip(&grid).any(|(p, t)| p.threshold != *t) {
            return Err(Error::InvalidArgument(format!(
                "curve `{}` uses a different threshold grid",
                c.keyword
            )));
        }
    }
    let points: Vec<RocPoint> = grid
        .iter()
        .map(|&tau| {
            let far = 1.0 - tau;
            let frr = curves.iter().map(|c| frr_at(c, far)).sum::<f64>() / curves.len() as f64;
            RocPoint {
                threshold: tau,
                far,
                frr,
            }
        })
        .collect();
    Ok(RocCurve {
        keyword: "overall".into(),
        auc: polyline_area(&points),
        points,
    })
}

/// One curve per keyword present in `preds`, then the vertical average.
pub fn keyword_rocs(preds: &Predictions, n_thresholds: usize) -> Result<Vec<RocCurve>> {
    let mut curves = Vec::new();
    for (k, word) in KEYWORDS.iter().enumerate().take(preds.classes) {
        let targets: Vec<bool> = preds.labels.iter().map(|&l| l == k).collect();
        if !targets.iter().any(|&t| t) || targets.iter().all(|&t| t) {
            log::warn!("no usable samples for keyword `{word}`, skipping its roc");
            continue;
        }
        curves.push(roc_for_keyword(word, &preds.scores(k), &targets, n_thresholds)?);
    }
    let overall = vertical_average(&curves)?;
    curves.push(overall);
    Ok(curves)
}

/// `keyword,threshold,far,frr`
pub fn roc_csv(curves: &[RocCurve]) -> String {
    let mut out = String::from("keyword,threshold,far,frr\n");
    for c in curves {
        for p in &c.points {
            let _ = writeln!(out, "{},{},{},{}", c.keyword, p.threshold, p.far, p.frr);
        }
    }
    out
}

/// Channel-averaged activation grid of one stage output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl FeatureGrid {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.cols) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Mean over channels of the map `[c, h, w]`.
pub fn channel_mean<T: Real>(map: &[T], channels: usize, h: usize, w: usize) -> FeatureGrid {
    let n = h * w;
    let values = (0..n)
        .map(|i| (0..channels).map(|c| map[c * n + i].as_f64()).sum::<f64>() / channels as f64)
        .collect();
    FeatureGrid {
        rows: h,
        cols: w,
        values,
    }
}

/// Channel-mean map after `stage` (1-based) for a single feature plane
/// `[1, 1, H, W]`, before or after its graph module.
pub fn stage_feature_map<T: Real>(
    model: &CENet<T>,
    features: &Tensor<T>,
    stage: usize,
    point: TapPoint,
) -> Result<FeatureGrid> {
    if !(1..=model.stages.len()).contains(&stage) {
        return Err(Error::InvalidArgument(format!("invalid stage index {stage}")));
    }
    if point == TapPoint::Augmented && model.stages[stage - 1].gcn.is_none() {
        return Err(Error::InvalidArgument(format!("stage {stage} has no graph module")));
    }
    if features.shape().first() != Some(&1) {
        return Err(Error::Shape(format!(
            "expected a single sample, got {:?}",
            features.shape()
        )));
    }
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, Mode::Infer);
    let x = s.graph.constant(features.shape().to_vec(), features.data().to_vec())?;
    model.forward(&mut s, x)?;
    let tap = *s
        .taps()
        .iter()
        .find(|t| t.stage == stage && t.point == point)
        .ok_or_else(|| Error::InvalidArgument(format!("stage {stage} was not captured")))?;
    let shape = g.shape(tap.var).to_vec();
    Ok(channel_mean(g.value(tap.var), shape[1], shape[2], shape[3]))
}
