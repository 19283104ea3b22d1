//! WebAssembly bindings for the browser demo in `www/`.
//!
//! The exported functions take and return plain values. Each one wraps a
//! Rust function of the same name in [`ops`] that native tests can call.

use wasm_bindgen::prelude::*;

pub mod ops {
    use kws_core::eval::roc_for_keyword;
    use kws_core::footprint::analyze;
    use kws_core::frontend::{AudioClip, FeatureKind, Frontend, FrontendConfig};
    use kws_core::model::{CENet, ModelConfig, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use serde_json::{json, Value};

    pub type Result<T> = std::result::Result<T, String>;

    /// Row-major `frames x dims` features of 16 kHz `samples`, padded or
    /// cropped to one second.
    pub fn features(samples: &[f32], kind: &str) -> Result<Features> {
        let kind: FeatureKind = kind.parse().map_err(|e| format!("{e}"))?;
        let clip = AudioClip::one_second(samples.to_vec()).map_err(|e| e.to_string())?;
        let m = Frontend::new(FrontendConfig::default().with_kind(kind))
            .and_then(|f| f.compute(&clip))
            .map_err(|e| e.to_string())?;
        Ok(Features {
            frames: m.frames(),
            dims: m.dims(),
            values: m.to_f32(),
        })
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct Features {
        pub frames: usize,
        pub dims: usize,
        pub values: Vec<f32>,
    }

    /// `"none"` or a comma list drawn from 1, 2 and 3.
    pub fn parse_stages(s: &str) -> Result<Vec<usize>> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(Vec::new());
        }
        let mut v = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad stage `{p}`")))
            .collect::<Result<Vec<_>>>()?;
        v.sort_unstable();
        v.dedup();
        match v.iter().find(|s| !(1..=3).contains(*s)) {
            Some(bad) => Err(format!("stage {bad} is outside 1-3")),
            None => Ok(v),
        }
    }

    /// Per-layer footprint as JSON: `{model, layers: [...], totals: {...}}`.
    pub fn footprint(variant: &str, stages: &str) -> Result<Value> {
        let variant: Variant = variant.parse().map_err(|e| format!("{e}"))?;
        let cfg = ModelConfig::new(variant).with_gcn(&parse_stages(stages)?);
        let model = CENet::<f32>::build(&cfg, 0).map_err(|e| e.to_string())?;
        let r = analyze(&model);
        let layers: Vec<Value> = r
            .layers
            .iter()
            .map(|l| {
                json!({
                    "name": l.name,
                    "kind": l.kind.as_str(),
                    "weights": l.weight_params,
                    "params": l.param_count,
                    "macs": l.mac_count,
                    "macs_full": l.mac_count_full,
                    "output": l.output_shape,
                })
            })
            .collect();
        Ok(json!({
            "model": r.model,
            "layers": layers,
            "totals": {
                "weights": r.totals.weight_params,
                "params": r.totals.params,
                "macs": r.totals.macs,
                "macs_full": r.totals.macs_full,
            },
        }))
    }

    /// ROC of synthetic detector scores. Target and non-target logits are
    /// drawn from unit normals `separation` apart and squashed to `[0, 1]`.
    pub fn roc(separation: f64, count: usize, thresholds: usize, seed: u64) -> Result<Value> {
        if !separation.is_finite() {
            return Err("separation must be finite".into());
        }
        if count < 2 {
            return Err(format!("need at least 2 scores, got {count}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
        let is_target: Vec<bool> = (0..count).map(|i| i % 2 == 0).collect();
        let scores: Vec<f64> = is_target
            .iter()
            .map(|&t| {
                let mean = if t { separation / 2.0 } else { -separation / 2.0 };
                let z = mean + unit.sample(&mut rng);
                1.0 / (1.0 + (-z).exp())
            })
            .collect();
        let curve = roc_for_keyword("synthetic", &scores, &is_target, thresholds).map_err(|e| e.to_string())?;
        let points: Vec<Value> = curve
            .points
            .iter()
            .map(|p| json!({"threshold": p.threshold, "far": p.far, "frr": p.frr}))
            .collect();
        Ok(json!({"auc": curve.auc, "points": points}))
    }
}

fn js_err(e: String) -> JsError {
    JsError::new(&e)
}

/// Flat row-major feature matrix; the frame count is `len / 40`.
#[wasm_bindgen]
pub fn features(samples: &[f32], kind: &str) -> Result<Vec<f32>, JsError> {
    ops::features(samples, kind).map(|f| f.values).map_err(js_err)
}

#[wasm_bindgen]
pub fn footprint(variant: &str, stages: &str) -> Result<String, JsError> {
    ops::footprint(variant, stages).map(|v| v.to_string()).map_err(js_err)
}

#[wasm_bindgen]
pub fn roc(separation: f64, count: usize, thresholds: usize, seed: u64) -> Result<String, JsError> {
    ops::roc(separation, count, thresholds, seed)
        .map(|v| v.to_string())
        .map_err(js_err)
}
