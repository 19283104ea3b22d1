use super::conv::ConvGeometry;
use super::{check_finite, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    AvgPool2d {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        x: Var,
        w: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: Var,
    },
    Sum {
        x: Var,
    },
    ToNodes {
        x: Var,
    },
    FromNodes {
        x: Var,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::AvgPool2d { x, .. }
            | Op::Relu { x }
            | Op::Softmax { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Sum { x }
            | Op::ToNodes { x }
            | Op::FromNodes { x } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Linear { x, w, b } => {
                let mut p = vec![*x, *w];
                p.extend(b.iter().copied());
                p
            }
            Op::MatMul { x, w } => vec![*x, *w],
            Op::Bmm { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale { x, s } => vec![*x, *s],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Accumulates gradients for the nodes of one backward pass.
pub(crate) struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    needs: &'a [bool],
}

impl<T: Real> GradSink<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    pub(crate) fn add(&mut self, v: Var, delta: Vec<T>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Tape of executed operations; the unit of reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the tape is always a
/// topological order and `backward` visits each recorded op exactly once.
pub struct Graph<T = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf. Its `requires_grad` flag decides
    /// whether gradients are collected for it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        check_finite(t.data(), "constant")?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded node is well-formed")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Adds the leaf gradient of `v` into `target.grad`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        if let Some(g) = self.grad(v) {
            target.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Smallest `|input|` seen by any ReLU on the tape. Finite-difference
    /// checks use it to stay clear of the kink.
    pub fn nearest_relu_kink(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|v| v.iter().map(|a| a.abs()))
            .reduce(T::min)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        check_finite(&value, name)?;
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = &self.nodes[loss.0].shape;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        let n = loss.0 + 1;
        let needs: Vec<bool> = self.nodes[..n].iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![T::one()]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let mut sink = GradSink {
                grads: &mut grads,
                needs: &needs,
            };
            self.backprop(Var(i), &g, &mut sink);
        }
        Ok(())
    }

    fn backprop(&self, out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let node = &self.nodes[out.0];
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::Conv2d { x, w, geom } => self.conv2d_backward(*x, *w, geom, g, sink),
            Op::AvgPool2d { x, kernel, stride } => self.avgpool2d_backward(*x, *kernel, *stride, out, g, sink),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => self.batch_norm_backward(*x, *gamma, *beta, xhat, inv_std, *train, g, sink),
            Op::Relu { x } => self.relu_backward(*x, out, g, sink),
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, g, sink),
            Op::MatMul { x, w } => self.matmul_backward(*x, *w, g, sink),
            Op::Bmm { a, b, trans_b } => self.bmm_backward(*a, *b, *trans_b, g, sink),
            Op::Softmax { x, axis } => self.softmax_backward(*x, *axis, out, g, sink),
            Op::GlobalAvgPool { x } => self.global_avg_pool_backward(*x, g, sink),
            Op::CrossEntropy { logits, labels, probs } => self.cross_entropy_backward(*logits, labels, probs, g, sink),
            Op::Add { a, b } => {
                sink.add(*a, g.to_vec());
                sink.add(*b, g.to_vec());
            }
            Op::Mul { a, b } => self.mul_backward(*a, *b, g, sink),
            Op::Scale { x, s } => self.scale_backward(*x, *s, g, sink),
            Op::Sum { x } => {
                let len = self.nodes[x.0].value.len();
                sink.add(*x, vec![g[0]; len]);
            }
            Op::ToNodes { x } => self.to_nodes_backward(*x, g, sink),
            Op::FromNodes { x } => self.from_nodes_backward(*x, g, sink),
        }
    }
}
