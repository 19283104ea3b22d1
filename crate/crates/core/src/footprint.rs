//! Parameter and multiply-accumulate accounting.
//!
//! Convolutions cost `c_in c_out k²` parameters and `h' w' k² c_in c_out`
//! multiplies, where `h' x w'` is the layer's output size. Graph modules are
//! reported twice: weights-only (`N (2 c c/r + c²)`) and full compute, which
//! adds the `N² c/r` affinity and `N² c` aggregation products.

use std::fmt;

use crate::model::{CENet, INITIAL_POOL};
use crate::tensor::{conv_out_size, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Pool,
    GlobalPool,
    Linear,
    Gcn,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Pool => "avgpool",
            LayerKind::GlobalPool => "global_avgpool",
            LayerKind::Linear => "linear",
            LayerKind::Gcn => "gcn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    /// Learnable weights (conv, linear incl. bias, graph maps and γ).
    pub weight_params: usize,
    /// Every learnable value, including BN affine parameters.
    pub param_count: usize,
    /// Weights-only multiply count.
    pub mac_count: usize,
    /// Multiply count including graph affinity and aggregation.
    pub mac_count_full: usize,
    pub output_shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Totals {
    pub weight_params: usize,
    pub params: usize,
    pub macs: usize,
    pub macs_full: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FootprintReport {
    pub model: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerRecord>,
    pub totals: Totals,
}

/// Description of the counting rules, printed alongside reports.
pub const CONVENTION: &str = "weights: conv + linear (with bias) + graph maps; params: weights + BN affine; \
macs: per-layer output size, graph weights only; macs_full: adds graph affinity and aggregation";

pub fn conv_params(k: usize, c_in: usize, c_out: usize) -> usize {
    c_in * c_out * k * k
}

pub fn conv_macs(h_out: usize, w_out: usize, k: usize, c_in: usize, c_out: usize) -> usize {
    h_out * w_out * k * k * c_in * c_out
}

/// `2 c (c/r) + c² + 1`
pub fn gcn_params(c: usize, r: usize) -> usize {
    2 * c * (c / r) + c * c + 1
}

pub fn gcn_macs_weights(nodes: usize, c: usize, r: usize) -> usize {
    nodes * (2 * c * (c / r) + c * c)
}

pub fn gcn_macs_full(nodes: usize, c: usize, r: usize) -> usize {
    gcn_macs_weights(nodes, c, r) + nodes * nodes * (c / r) + nodes * nodes * c
}

struct Builder {
    layers: Vec<LayerRecord>,
}

impl Builder {
    fn push(
        &mut self,
        name: String,
        kind: LayerKind,
        weights: usize,
        params: usize,
        macs: usize,
        full: usize,
        shape: Vec<usize>,
    ) {
        self.layers.push(LayerRecord {
            name,
            kind,
            weight_params: weights,
            param_count: params,
            mac_count: macs,
            mac_count_full: full,
            output_shape: shape,
        });
    }

    fn conv(
        &mut self,
        name: &str,
        k: usize,
        stride: usize,
        c_in: usize,
        c_out: usize,
        h: usize,
        w: usize,
    ) -> (usize, usize) {
        let pad = k / 2;
        let ho = conv_out_size(h, k, stride, pad).unwrap_or(0);
        let wo = conv_out_size(w, k, stride, pad).unwrap_or(0);
        let p = conv_params(k, c_in, c_out);
        let m = conv_macs(ho, wo, k, c_in, c_out);
        self.push(name.to_string(), LayerKind::Conv, p, p, m, m, vec![c_out, ho, wo]);
        (ho, wo)
    }

    fn bn(&mut self, name: &str, c: usize, h: usize, w: usize) {
        self.push(name.to_string(), LayerKind::BatchNorm, 0, 2 * c, 0, 0, vec![c, h, w]);
    }
}

/// Full report for `model` on a single `1 x H x W` input plane.
pub fn analyze<T: Real>(model: &CENet<T>) -> FootprintReport {
    let cfg = model.config();
    let mut b = Builder { layers: Vec::new() };
    let (mut h, mut w) = (cfg.input_height, cfg.input_width);
    let c0 = model.initial_conv.out_channels;
    (h, w) = b.conv("initial.conv", 3, 1, 1, c0, h, w);
    b.bn("initial.bn", c0, h, w);
    h = conv_out_size(h, INITIAL_POOL, INITIAL_POOL, 0).unwrap_or(0);
    w = conv_out_size(w, INITIAL_POOL, INITIAL_POOL, 0).unwrap_or(0);
    b.push("initial.pool".into(), LayerKind::Pool, 0, 0, 0, 0, vec![c0, h, w]);
    let mut c = c0;
    for (si, stage) in model.stages.iter().enumerate() {
        for (bi, block) in stage.blocks.iter().enumerate() {
            let name = format!("stage{}.block{bi}", si + 1);
            let (hin, win) = (h, w);
            let mut hw = (h, w);
            for (ci, conv) in [&block.reduce, &block.spatial, &block.restore].into_iter().enumerate() {
                hw = b.conv(
                    &format!("{name}.conv{}", ci + 1),
                    conv.kernel,
                    conv.stride,
                    conv.in_channels,
                    conv.out_channels,
                    hw.0,
                    hw.1,
                );
                b.bn(&format!("{name}.bn{}", ci + 1), conv.out_channels, hw.0, hw.1);
            }
            if let Some(p) = &block.shortcut {
                let s = b.conv(
                    &format!("{name}.shortcut.conv"),
                    p.conv.kernel,
                    p.conv.stride,
                    p.conv.in_channels,
                    p.conv.out_channels,
                    hin,
                    win,
                );
                b.bn(&format!("{name}.shortcut.bn"), p.conv.out_channels, s.0, s.1);
            }
            (h, w) = hw;
            c = block.out_channels();
        }
        if let Some(g) = &stage.gcn {
            let n = h * w;
            let r = g.channels / g.embed_dim();
            let p = g.param_count();
            b.push(
                format!("stage{}.gcn", si + 1),
                LayerKind::Gcn,
                p,
                p,
                gcn_macs_weights(n, g.channels, r),
                gcn_macs_full(n, g.channels, r),
                vec![c, h, w],
            );
        }
    }
    b.push("pool".into(), LayerKind::GlobalPool, 0, 0, 0, 0, vec![c]);
    let (fi, fo) = (model.classifier.in_features(), model.classifier.out_features());
    b.push(
        "classifier".into(),
        LayerKind::Linear,
        fi * fo + fo,
        fi * fo + fo,
        fi * fo,
        fi * fo,
        vec![fo],
    );
    let totals = b.layers.iter().fold(Totals::default(), |t, l| Totals {
        weight_params: t.weight_params + l.weight_params,
        params: t.params + l.param_count,
        macs: t.macs + l.mac_count,
        macs_full: t.macs_full + l.mac_count_full,
    });
    FootprintReport {
        model: cfg.display_name(),
        input_shape: vec![1, 1, cfg.input_height, cfg.input_width],
        layers: b.layers,
        totals,
    }
}

/// Same as [`analyze`]; parameter totals live in `totals.weight_params` / `totals.params`.
pub fn count_params<T: Real>(model: &CENet<T>) -> FootprintReport {
    analyze(model)
}

/// Same as [`analyze`]; multiply totals live in `totals.macs` / `totals.macs_full`.
pub fn count_macs<T: Real>(model: &CENet<T>) -> FootprintReport {
    analyze(model)
}

impl FootprintReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,kind,weight_params,params,macs,macs_full,output_shape\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                l.name,
                l.kind.as_str(),
                l.weight_params,
                l.param_count,
                l.mac_count,
                l.mac_count_full,
                shape_str(&l.output_shape)
            ));
        }
        let t = &self.totals;
        out.push_str(&format!(
            "total,,{},{},{},{},\n",
            t.weight_params, t.params, t.macs, t.macs_full
        ));
        out
    }
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// `16.2K`, `1.95M`
pub fn human(n: usize) -> String {
    let x = n as f64;
    if x >= 1e6 {
        format!("{:.2}M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.1}K", x / 1e3)
    } else {
        n.to_string()
    }
}

impl fmt::Display for FootprintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}  input {}", self.model, shape_str(&self.input_shape))?;
        writeln!(
            f,
            "{:<28} {:<15} {:>9} {:>9} {:>12} {:>12}  output",
            "layer", "kind", "weights", "params", "macs", "macs_full"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<28} {:<15} {:>9} {:>9} {:>12} {:>12}  {}",
                l.name,
                l.kind.as_str(),
                l.weight_params,
                l.param_count,
                l.mac_count,
                l.mac_count_full,
                shape_str(&l.output_shape)
            )?;
        }
        let t = &self.totals;
        writeln!(
            f,
            "total: {} weights ({}), {} params ({}), {} macs ({}), {} macs full ({})",
            t.weight_params,
            human(t.weight_params),
            t.params,
            human(t.params),
            t.macs,
            human(t.macs),
            t.macs_full,
            human(t.macs_full)
        )?;
        write!(f, "convention: {CONVENTION}")
    }
}
