//! CENet keyword-spotting networks.

pub mod block;
pub mod layers;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use block::{Projection, ResidualBlock};
pub use layers::{BatchNorm2d, Conv2d, Linear, Param};

use crate::error::{Error, Result};
use crate::gcn::{NonLocalGcn, DEFAULT_REDUCTION};
use crate::tensor::{BatchStats, Graph, Real, Tensor, Var};
use layers::Slots;

/// Number of keyword classes (10 commands + unknown + silence).
pub const N_CLASSES: usize = 12;
/// Input plane: 101 frames (time) x 40 coefficients (frequency).
pub const INPUT_HEIGHT: usize = 101;
pub const INPUT_WIDTH: usize = 40;
/// Stddev of the classifier weights at initialization.
pub const CLASSIFIER_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Cenet6,
    Cenet24,
    Cenet40,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cenet6, Variant::Cenet24, Variant::Cenet40];

    /// Bottleneck blocks per stage, excluding the connection block.
    pub fn repeats(self) -> [usize; 3] {
        match self {
            Variant::Cenet6 => [1, 1, 1],
            Variant::Cenet24 => [7, 7, 7],
            Variant::Cenet40 => [15, 15, 7],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cenet6 => "cenet6",
            Variant::Cenet24 => "cenet24",
            Variant::Cenet40 => "cenet40",
        }
    }

    /// Depth suffix used in model names (6, 24, 40).
    pub fn depth(self) -> usize {
        match self {
            Variant::Cenet6 => 6,
            Variant::Cenet24 => 24,
            Variant::Cenet40 => 40,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        match t.trim_start_matches("cenet") {
            "6" => Ok(Variant::Cenet6),
            "24" => Ok(Variant::Cenet24),
            "40" => Ok(Variant::Cenet40),
            _ => Err(Error::InvalidConfig(format!("unknown model variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Initial,
    Bottleneck,
    Connection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ConvSpec {
            kernel,
            in_channels,
            out_channels,
            stride,
        }
    }

    pub fn params(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub convs: Vec<ConvSpec>,
    pub stride: usize,
}

impl BlockSpec {
    pub fn initial(out_channels: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Initial,
            convs: vec![ConvSpec::new(3, 1, out_channels, 1)],
            stride: 1,
        }
    }

    pub fn bottleneck(channels: usize, width: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Bottleneck,
            convs: vec![
                ConvSpec::new(1, channels, width, 1),
                ConvSpec::new(3, width, width, 1),
                ConvSpec::new(1, width, channels, 1),
            ],
            stride: 1,
        }
    }

    pub fn connection(in_channels: usize, width: usize, out_channels: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Connection,
            convs: vec![
                ConvSpec::new(1, in_channels, width, 1),
                ConvSpec::new(3, width, width, 2),
                ConvSpec::new(1, width, out_channels, 1),
            ],
            stride: 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.convs.first().map_or(0, |c| c.in_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("{:?} block: {msg}", self.kind)));
        if self
            .convs
            .iter()
            .any(|c| c.kernel == 0 || c.in_channels == 0 || c.out_channels == 0 || c.stride == 0)
        {
            return bad("zero-sized convolution");
        }
        if self.convs.windows(2).any(|p| p[0].out_channels != p[1].in_channels) {
            return bad("channel counts do not compose");
        }
        match self.kind {
            BlockKind::Initial => {
                if self.convs.len() != 1 {
                    return bad("expected a single convolution");
                }
            }
            BlockKind::Bottleneck | BlockKind::Connection => {
                let kernels: Vec<usize> = self.convs.iter().map(|c| c.kernel).collect();
                if kernels != [1, 3, 1] {
                    return bad("expected 1x1, 3x3, 1x1 convolutions");
                }
                if self.convs[1].stride != self.stride || self.convs[0].stride != 1 || self.convs[2].stride != 1 {
                    return bad("the stride belongs on the 3x3 convolution");
                }
                if self.kind == BlockKind::Bottleneck && (self.in_channels() != self.out_channels() || self.stride != 1)
                {
                    return bad("identity shortcut needs equal channels and stride 1");
                }
                if self.kind == BlockKind::Connection && (self.out_channels() <= self.in_channels() || self.stride != 2)
                {
                    return bad("must widen channels with stride 2");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stage_repeats: [usize; 3],
    pub initial_channels: usize,
    /// `(in, out)` channels of each stage.
    pub stage_channels: [(usize, usize); 3],
    /// Inner width of the bottlenecks in each stage.
    pub bottleneck_widths: [usize; 3],
    pub n_classes: usize,
    /// 1-based stage indices followed by a graph module.
    pub gcn_stages: Vec<usize>,
    pub gcn_reduction: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            stage_repeats: variant.repeats(),
            initial_channels: 16,
            stage_channels: [(16, 32), (32, 48), (48, 64)],
            bottleneck_widths: [8, 8, 12],
            n_classes: N_CLASSES,
            gcn_stages: Vec::new(),
            gcn_reduction: DEFAULT_REDUCTION,
            input_height: INPUT_HEIGHT,
            input_width: INPUT_WIDTH,
        }
    }

    pub fn with_gcn(mut self, stages: &[usize]) -> Self {
        self.gcn_stages = normalize_stages(stages);
        self
    }

    /// `CENet-6`, `CENet-GCN-24`, ...
    pub fn display_name(&self) -> String {
        if self.gcn_stages.is_empty() {
            format!("CENet-{}", self.variant.depth())
        } else {
            format!("CENet-GCN-{}", self.variant.depth())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_repeats != self.variant.repeats() {
            return Err(Error::InvalidConfig(format!(
                "{} uses stage repeats {:?}, got {:?}",
                self.variant,
                self.variant.repeats(),
                self.stage_repeats
            )));
        }
        if self.initial_channels != self.stage_channels[0].0 || self.stage_channels.windows(2).any(|p| p[0].1 != p[1].0)
        {
            return Err(Error::InvalidConfig("stage channels do not chain".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.input_height < 8 || self.input_width < 8 {
            return Err(Error::InvalidConfig(format!(
                "input plane {}x{} is too small",
                self.input_height, self.input_width
            )));
        }
        for &s in &self.gcn_stages {
            if !(1..=3).contains(&s) {
                return Err(Error::InvalidConfig(format!(
                    "invalid stage index {s} (expected 1..=3)"
                )));
            }
            let c = self.stage_channels[s - 1].1;
            if self.gcn_reduction == 0 || c % self.gcn_reduction != 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {s} has {c} channels, not divisible by reduction {}",
                    self.gcn_reduction
                )));
            }
        }
        for stage in self.block_specs() {
            for b in &stage {
                b.validate()?;
            }
        }
        BlockSpec::initial(self.initial_channels).validate()
    }

    /// Block specifications of each stage, bottlenecks first, then the connection block.
    pub fn block_specs(&self) -> Vec<Vec<BlockSpec>> {
        (0..3)
            .map(|s| {
                let (cin, cout) = self.stage_channels[s];
                let width = self.bottleneck_widths[s];
                let mut v: Vec<BlockSpec> = (0..self.stage_repeats[s])
                    .map(|_| BlockSpec::bottleneck(cin, width))
                    .collect();
                v.push(BlockSpec::connection(cin, width, cout));
                v
            })
            .collect()
    }
}

fn normalize_stages(stages: &[usize]) -> Vec<usize> {
    let mut v = stages.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Where a stage output was captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapPoint {
    /// After the connection block, before any graph module.
    StageOutput,
    /// After the graph module.
    Augmented,
}

#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub stage: usize,
    pub point: TapPoint,
    pub var: Var,
}

/// One forward pass over a graph: binds parameters to leaves and collects
/// batch statistics to be folded into the running estimates afterwards.
pub struct Session<'g, T: Real = f32> {
    pub graph: &'g mut Graph<T>,
    pub mode: Mode,
    bindings: Vec<Option<Var>>,
    pub(crate) norm_updates: Vec<(usize, BatchStats<T>)>,
    taps: Vec<Tap>,
}

/// What a session leaves behind once the graph is free again.
#[derive(Debug, Clone, Default)]
pub struct ForwardRecord<T = f32> {
    bindings: Vec<Option<Var>>,
    norm_updates: Vec<(usize, BatchStats<T>)>,
    pub taps: Vec<Tap>,
}

impl<T> ForwardRecord<T> {
    pub fn var_of(&self, p: &Param<T>) -> Option<Var> {
        self.bindings.get(p.slot).copied().flatten()
    }
}

impl<'g, T: Real> Session<'g, T> {
    pub fn new(graph: &'g mut Graph<T>, mode: Mode) -> Self {
        Session {
            graph,
            mode,
            bindings: Vec::new(),
            norm_updates: Vec::new(),
            taps: Vec::new(),
        }
    }

    /// Leaf for `p`, created on first use.
    pub fn bind(&mut self, p: &Param<T>) -> Var {
        if p.slot >= self.bindings.len() {
            self.bindings.resize(p.slot + 1, None);
        }
        if let Some(v) = self.bindings[p.slot] {
            return v;
        }
        let v = self.graph.leaf(&p.tensor);
        self.bindings[p.slot] = Some(v);
        v
    }

    pub fn var_of(&self, p: &Param<T>) -> Option<Var> {
        self.bindings.get(p.slot).copied().flatten()
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub fn finish(self) -> ForwardRecord<T> {
        ForwardRecord {
            bindings: self.bindings,
            norm_updates: self.norm_updates,
            taps: self.taps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage<T = f32> {
    pub blocks: Vec<ResidualBlock<T>>,
    pub gcn: Option<NonLocalGcn<T>>,
}

/// CENet: initial block, three stages and a global-pool + linear head.
#[derive(Debug, Clone)]
pub struct CENet<T = f32> {
    cfg: ModelConfig,
    seed: u64,
    pub initial_conv: Conv2d<T>,
    pub initial_bn: BatchNorm2d<T>,
    pub stages: Vec<Stage<T>>,
    pub classifier: Linear<T>,
    slots: Slots,
}

/// Pooling window of the initial block.
pub const INITIAL_POOL: usize = 2;

fn gcn_rng(seed: u64, stage: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0000_0000_0000u64.wrapping_add(stage as u64))
}

impl<T: Real> CENet<T> {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slots = Slots::default();
        let c0 = cfg.initial_channels;
        let initial_conv = Conv2d::new("initial.conv", 1, c0, 3, 1, &mut slots, &mut rng);
        let initial_bn = BatchNorm2d::new("initial.bn", c0, &mut slots);
        let mut stages = Vec::with_capacity(3);
        for (s, specs) in cfg.block_specs().into_iter().enumerate() {
            let blocks = specs
                .into_iter()
                .enumerate()
                .map(|(b, spec)| ResidualBlock::new(&format!("stage{}.block{b}", s + 1), spec, &mut slots, &mut rng))
                .collect();
            stages.push(Stage { blocks, gcn: None });
        }
        let classifier = Linear::new(
            "classifier",
            cfg.stage_channels[2].1,
            cfg.n_classes,
            CLASSIFIER_INIT_STD,
            &mut slots,
            &mut rng,
        );
        let mut model = CENet {
            cfg: ModelConfig {
                gcn_stages: Vec::new(),
                ..cfg.clone()
            },
            seed,
            initial_conv,
            initial_bn,
            stages,
            classifier,
            slots,
        };
        if !cfg.gcn_stages.is_empty() {
            model = model.insert_gcn(&cfg.gcn_stages)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Appends a graph module (γ = 0) after each listed stage that lacks one.
    pub fn insert_gcn(mut self, stages: &[usize]) -> Result<Self> {
        let stages = normalize_stages(stages);
        let mut cfg = self.cfg.clone();
        cfg.gcn_stages = normalize_stages(&[cfg.gcn_stages.clone(), stages.clone()].concat());
        cfg.validate()?;
        for &s in &stages {
            if self.stages[s - 1].gcn.is_some() {
                continue;
            }
            let c = cfg.stage_channels[s - 1].1;
            let mut rng = gcn_rng(self.seed, s);
            let gcn = NonLocalGcn::new(
                &format!("stage{s}.gcn"),
                c,
                cfg.gcn_reduction,
                &mut self.slots,
                &mut rng,
            )?;
            self.stages[s - 1].gcn = Some(gcn);
        }
        self.cfg = cfg;
        Ok(self)
    }

    /// Logits `[B, n_classes]` for features `[B, 1, H, W]`.
    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x);
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.cfg.input_height || shape[3] != self.cfg.input_width {
            return Err(Error::Shape(format!(
                "expected features [B, 1, {}, {}], got {:?}",
                self.cfg.input_height, self.cfg.input_width, shape
            )));
        }
        let h = self.initial_conv.forward(s, x)?;
        let h = self.initial_bn.forward(s, h)?;
        let h = s.graph.relu(h)?;
        let mut h = s.graph.avgpool2d(h, INITIAL_POOL, INITIAL_POOL)?;
        for (i, stage) in self.stages.iter().enumerate() {
            for block in &stage.blocks {
                h = block.forward(s, h)?;
            }
            s.taps.push(Tap {
                stage: i + 1,
                point: TapPoint::StageOutput,
                var: h,
            });
            if let Some(g) = &stage.gcn {
                h = g.forward(s, h)?;
                s.taps.push(Tap {
                    stage: i + 1,
                    point: TapPoint::Augmented,
                    var: h,
                });
            }
        }
        let pooled = s.graph.global_avg_pool(h)?;
        self.classifier.forward(s, pooled)
    }

    /// Convenience inference pass on a batch tensor.
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, Mode::Infer);
        let x = s.graph.constant(features.shape().to_vec(), features.data().to_vec())?;
        let y = self.forward(&mut s, x)?;
        Ok(g.tensor(y))
    }

    /// Adds the gradients of every bound parameter into its tensor.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, record: &ForwardRecord<T>) -> Result<()> {
        for p in self.params_mut() {
            if let Some(v) = record.var_of(p) {
                graph.accumulate_into(v, &mut p.tensor)?;
            }
        }
        Ok(())
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_norm_updates(&mut self, record: &ForwardRecord<T>) {
        let mut by_slot: HashMap<usize, &BatchStats<T>> = HashMap::new();
        for (slot, stats) in &record.norm_updates {
            by_slot.insert(*slot, stats);
        }
        for bn in self.norms_mut() {
            if let Some(stats) = by_slot.get(&bn.slot) {
                bn.update_running(stats);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Parameters in a fixed order: initial block, stages (blocks then
    /// graph module), classifier.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.initial_conv.weight, &self.initial_bn.gamma, &self.initial_bn.beta];
        for stage in &self.stages {
            for b in &stage.blocks {
                v.push(&b.reduce.weight);
                v.push(&b.reduce_bn.gamma);
                v.push(&b.reduce_bn.beta);
                v.push(&b.spatial.weight);
                v.push(&b.spatial_bn.gamma);
                v.push(&b.spatial_bn.beta);
                v.push(&b.restore.weight);
                v.push(&b.restore_bn.gamma);
                v.push(&b.restore_bn.beta);
                if let Some(p) = &b.shortcut {
                    v.push(&p.conv.weight);
                    v.push(&p.bn.gamma);
                    v.push(&p.bn.beta);
                }
            }
            if let Some(g) = &stage.gcn {
                v.extend(g.params());
            }
        }
        v.push(&self.classifier.weight);
        v.push(&self.classifier.bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![
            &mut self.initial_conv.weight,
            &mut self.initial_bn.gamma,
            &mut self.initial_bn.beta,
        ];
        for stage in &mut self.stages {
            for b in &mut stage.blocks {
                v.extend(b.params_mut());
            }
            if let Some(g) = &mut stage.gcn {
                v.extend(g.params_mut());
            }
        }
        v.push(&mut self.classifier.weight);
        v.push(&mut self.classifier.bias);
        v
    }

    pub fn norms(&self) -> Vec<&BatchNorm2d<T>> {
        let mut v = vec![&self.initial_bn];
        for stage in &self.stages {
            for b in &stage.blocks {
                v.extend(b.norms());
            }
        }
        v
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut v = vec![&mut self.initial_bn];
        for stage in &mut self.stages {
            for b in &mut stage.blocks {
                v.extend(b.norms_mut());
            }
        }
        v
    }

    /// Every convolution in execution order, with its name.
    pub fn convs(&self) -> Vec<&Conv2d<T>> {
        let mut v = vec![&self.initial_conv];
        for stage in &self.stages {
            for b in &stage.blocks {
                v.extend(b.convs());
            }
        }
        v
    }

    pub fn gcn_modules(&self) -> Vec<(usize, &NonLocalGcn<T>)> {
        self.stages
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.gcn.as_ref().map(|g| (i + 1, g)))
            .collect()
    }

    pub fn gcn_modules_mut(&mut self) -> Vec<(usize, &mut NonLocalGcn<T>)> {
        self.stages
            .iter_mut()
            .enumerate()
            .filter_map(|(i, s)| s.gcn.as_mut().map(|g| (i + 1, g)))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Named tensors for persistence: parameters, then running statistics.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut v: Vec<(String, Tensor<T>)> = self
            .params()
            .into_iter()
            .map(|p| {
                let t = Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec()).expect("valid param");
                (p.name.clone(), t)
            })
            .collect();
        for bn in self.norms() {
            let c = bn.channels();
            v.push((
                format!("{}.running_mean", bn.name),
                Tensor::new(vec![c], bn.running_mean.clone()).expect("valid stats"),
            ));
            v.push((
                format!("{}.running_var", bn.name),
                Tensor::new(vec![c], bn.running_var.clone()).expect("valid stats"),
            ));
        }
        v
    }

    /// Loads every named tensor of [`CENet::state`]; names and shapes must match.
    pub fn load_state(&mut self, state: &HashMap<String, Tensor<T>>) -> Result<()> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let t = state
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor `{name}` holds non-finite values")));
            }
            Ok(t.data().to_vec())
        };
        for p in self.params_mut() {
            let data = fetch(&p.name, p.tensor.shape())?;
            p.tensor.data_mut().copy_from_slice(&data);
        }
        for bn in self.norms_mut() {
            let c = [bn.channels()];
            bn.running_mean = fetch(&format!("{}.running_mean", bn.name), &c)?;
            bn.running_var = fetch(&format!("{}.running_var", bn.name), &c)?;
        }
        Ok(())
    }
}

impl<T: Real> ResidualBlock<T> {
    /// A block outside any model, initialized from `seed`.
    pub fn standalone(spec: BlockSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.kind == BlockKind::Initial {
            return Err(Error::InvalidConfig("the initial block is not residual".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ResidualBlock::new("block", spec, &mut Slots::default(), &mut rng))
    }
}
