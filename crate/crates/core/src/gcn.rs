//! Non-local graph context module.
//!
//! The `h x w` positions of a stage output form a fully connected graph over
//! `N = h w` nodes, each carrying a `c`-channel feature `x_i`. One message
//! passing step computes
//!
//! ```text
//! A   = row_softmax( (X W_θᵀ) (X W_φᵀ)ᵀ )      // embedded Gaussian affinity
//! X̃   = ReLU( A X W )
//! X_a = γ X̃ + X
//! ```
//!
//! with `W_θ, W_φ: (c/r) x c`, `W: c x c` and a learnable scalar `γ` that
//! starts at zero, so a freshly inserted module is the identity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::layers::{normal_tensor, Param, Slots};
use crate::model::Session;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Default channel reduction of the θ / φ embeddings.
pub const DEFAULT_REDUCTION: usize = 4;

#[derive(Debug, Clone)]
pub struct NonLocalGcn<T = f32> {
    pub channels: usize,
    pub reduction: usize,
    /// `[c/r, c]`
    pub w_theta: Param<T>,
    /// `[c/r, c]`
    pub w_phi: Param<T>,
    /// `[c, c]`, applied on the right: messages are `X W`.
    pub w: Param<T>,
    /// `[1]`
    pub gamma: Param<T>,
}

impl<T: Real> NonLocalGcn<T> {
    pub(crate) fn new(
        name: &str,
        channels: usize,
        reduction: usize,
        slots: &mut Slots,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels == 0 || channels % reduction != 0 {
            return Err(Error::InvalidConfig(format!(
                "graph module needs channels ({channels}) divisible by reduction ({reduction})"
            )));
        }
        let inner = channels / reduction;
        let embed_std = (1.0 / channels as f64).sqrt();
        Ok(NonLocalGcn {
            channels,
            reduction,
            w_theta: Param::new(
                format!("{name}.w_theta"),
                normal_tensor(vec![inner, channels], embed_std, rng),
                true,
                slots.param(),
            ),
            w_phi: Param::new(
                format!("{name}.w_phi"),
                normal_tensor(vec![inner, channels], embed_std, rng),
                true,
                slots.param(),
            ),
            w: Param::new(
                format!("{name}.w"),
                normal_tensor(vec![channels, channels], (2.0 / channels as f64).sqrt(), rng),
                true,
                slots.param(),
            ),
            gamma: Param::new(format!("{name}.gamma"), Tensor::zeros(vec![1]), false, slots.param()),
        })
    }

    /// Standalone module with explicit weights (mostly for analysis and tests).
    pub fn from_weights(w_theta: Tensor<T>, w_phi: Tensor<T>, w: Tensor<T>, gamma: T) -> Result<Self> {
        let c = w.shape().get(1).copied().unwrap_or(0);
        let ok = w.shape() == [c, c]
            && w_theta.shape().len() == 2
            && w_theta.shape()[1] == c
            && w_phi.shape() == w_theta.shape();
        if !ok || c == 0 {
            return Err(Error::Shape(format!(
                "graph weights {:?} / {:?} / {:?} are inconsistent",
                w_theta.shape(),
                w_phi.shape(),
                w.shape()
            )));
        }
        let inner = w_theta.shape()[0];
        let mut slots = Slots::default();
        Ok(NonLocalGcn {
            channels: c,
            reduction: if inner > 0 && c % inner == 0 { c / inner } else { 0 },
            w_theta: Param::new("gcn.w_theta".into(), w_theta, true, slots.param()),
            w_phi: Param::new("gcn.w_phi".into(), w_phi, true, slots.param()),
            w: Param::new("gcn.w".into(), w, true, slots.param()),
            gamma: Param::new("gcn.gamma".into(), Tensor::scalar(gamma), false, slots.param()),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.w_theta.tensor.shape()[0]
    }

    pub fn gamma_value(&self) -> T {
        self.gamma.tensor.data()[0]
    }

    pub fn set_gamma(&mut self, v: T) {
        self.gamma.tensor.data_mut()[0] = v;
    }

    /// `2 c (c/r) + c² + 1`
    pub fn param_count(&self) -> usize {
        2 * self.channels * self.embed_dim() + self.channels * self.channels + 1
    }

    /// Row-softmaxed embedded-Gaussian affinity of node rows `xn: [B, N, c]`.
    pub fn affinity_var(&self, s: &mut Session<'_, T>, xn: Var) -> Result<Var> {
        let wt = s.bind(&self.w_theta);
        let wp = s.bind(&self.w_phi);
        let theta = s.graph.linear(xn, wt, None)?;
        let phi = s.graph.linear(xn, wp, None)?;
        let logits = s.graph.bmm(theta, phi, true)?;
        s.graph.softmax(logits, 2)
    }

    /// `ReLU(A X W)` for node rows `xn: [B, N, c]`.
    pub fn message_var(&self, s: &mut Session<'_, T>, xn: Var) -> Result<Var> {
        let a = self.affinity_var(s, xn)?;
        let ax = s.graph.bmm(a, xn, false)?;
        let w = s.bind(&self.w);
        let m = s.graph.matmul(ax, w)?;
        s.graph.relu(m)
    }

    /// `γ X̃ + X` on node rows.
    pub fn augment_var(&self, s: &mut Session<'_, T>, xn: Var) -> Result<Var> {
        let msg = self.message_var(s, xn)?;
        let g = s.bind(&self.gamma);
        let scaled = s.graph.scale(msg, g)?;
        s.graph.add(scaled, xn)
    }

    /// Applies the module to a feature map `[B, c, h, w]`.
    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "graph module over {} channels got {shape:?}",
                self.channels
            )));
        }
        let xn = s.graph.to_nodes(x)?;
        let xa = self.augment_var(s, xn)?;
        s.graph.from_nodes(xa, shape[2], shape[3])
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w_theta, &mut self.w_phi, &mut self.w, &mut self.gamma]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w_theta, &self.w_phi, &self.w, &self.gamma]
    }

    fn run(&self, x: &NodeFeatureSet<T>, f: NodeOp) -> Result<Tensor<T>> {
        if x.channels() != self.channels {
            return Err(Error::Shape(format!(
                "node features with {} channels for a {}-channel module",
                x.channels(),
                self.channels
            )));
        }
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, crate::model::Mode::Infer);
        let xn = s.graph.constant(vec![1, x.len(), x.channels()], x.data().to_vec())?;
        let out = match f {
            NodeOp::Affinity => self.affinity_var(&mut s, xn)?,
            NodeOp::Message => self.message_var(&mut s, xn)?,
            NodeOp::Augment => self.augment_var(&mut s, xn)?,
        };
        let cols = s.graph.shape(out)[2];
        let data = s.graph.value(out).to_vec();
        Tensor::new(vec![x.len(), cols], data)
    }

    /// `N x N` affinity matrix `A(X)`.
    pub fn affinity(&self, x: &NodeFeatureSet<T>) -> Result<Tensor<T>> {
        self.run(x, NodeOp::Affinity)
    }

    /// Context features `X̃ = ReLU(A X W)`, `N x c`.
    pub fn message_pass(&self, x: &NodeFeatureSet<T>) -> Result<Tensor<T>> {
        self.run(x, NodeOp::Message)
    }

    /// Augmented features `X_a = γ X̃ + X`, `N x c`.
    pub fn augment(&self, x: &NodeFeatureSet<T>) -> Result<NodeFeatureSet<T>> {
        let t = self.run(x, NodeOp::Augment)?;
        NodeFeatureSet::new(t.into_data(), x.len(), x.channels(), x.grid())
    }
}

#[derive(Clone, Copy)]
enum NodeOp {
    Affinity,
    Message,
    Augment,
}

/// Plain dot-product Gaussian affinity `softmax_j(x_iᵀ x_j)`, `N x N`.
pub fn gaussian_affinity<T: Real>(x: &NodeFeatureSet<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xn = g.constant(vec![1, x.len(), x.channels()], x.data().to_vec())?;
    let logits = g.bmm(xn, xn, true)?;
    let a = g.softmax(logits, 2)?;
    Tensor::new(vec![x.len(), x.len()], g.value(a).to_vec())
}

/// `N x c` node features of one feature map, remembering the grid so the
/// map can be rebuilt.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureSet<T = f32> {
    data: Vec<T>,
    nodes: usize,
    channels: usize,
    grid: (usize, usize),
}

impl<T: Real> NodeFeatureSet<T> {
    pub fn new(data: Vec<T>, nodes: usize, channels: usize, grid: (usize, usize)) -> Result<Self> {
        if nodes == 0 || channels == 0 || data.len() != nodes * channels || grid.0 * grid.1 != nodes {
            return Err(Error::Shape(format!(
                "{} values for {nodes} nodes x {channels} channels on a {grid:?} grid",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("node features"));
        }
        Ok(NodeFeatureSet {
            data,
            nodes,
            channels,
            grid,
        })
    }

    /// Rows from a flat `N x c` matrix with a `N x 1` grid.
    pub fn from_rows(data: Vec<T>, nodes: usize, channels: usize) -> Result<Self> {
        Self::new(data, nodes, channels, (nodes, 1))
    }

    /// Flattens a `[c, h, w]` feature map into `h w` rows.
    pub fn from_feature_map(map: &Tensor<T>) -> Result<Self> {
        let s = map.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("feature map must be [c, h, w], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let n = h * w;
        let v = map.data();
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            data.extend((0..c).map(|ch| v[ch * n + i]));
        }
        Self::new(data, n, c, (h, w))
    }

    pub fn to_feature_map(&self) -> Tensor<T> {
        let (h, w) = self.grid;
        let n = self.nodes;
        let mut out = vec![T::zero(); n * self.channels];
        for i in 0..n {
            for ch in 0..self.channels {
                out[ch * n + i] = self.data[i * self.channels + ch];
            }
        }
        Tensor::new(vec![self.channels, h, w], out).expect("consistent grid")
    }

    pub fn len(&self) -> usize {
        self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.nodes == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }
}
