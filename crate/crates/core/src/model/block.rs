use rand::Rng;

use super::layers::{BatchNorm2d, Conv2d, Param, Slots};
use super::{BlockKind, BlockSpec, Session};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

/// Shortcut projection used when a block changes shape.
#[derive(Debug, Clone)]
pub struct Projection<T = f32> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

/// Bottleneck or connection block:
/// `ReLU(BN(conv1x1(ReLU(BN(conv3x3(ReLU(BN(conv1x1(x)))))))) + shortcut(x))`.
///
/// Connection blocks put the stride on the 3x3 conv and use a strided 1x1
/// projection + BN on the shortcut.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T = f32> {
    pub spec: BlockSpec,
    pub reduce: Conv2d<T>,
    pub reduce_bn: BatchNorm2d<T>,
    pub spatial: Conv2d<T>,
    pub spatial_bn: BatchNorm2d<T>,
    pub restore: Conv2d<T>,
    pub restore_bn: BatchNorm2d<T>,
    pub shortcut: Option<Projection<T>>,
}

impl<T: Real> ResidualBlock<T> {
    pub(crate) fn new(name: &str, spec: BlockSpec, slots: &mut Slots, rng: &mut impl Rng) -> Self {
        assert_eq!(spec.convs.len(), 3, "residual blocks hold three convolutions");
        let c = &spec.convs;
        let reduce = Conv2d::new(
            &format!("{name}.conv1"),
            c[0].in_channels,
            c[0].out_channels,
            1,
            1,
            slots,
            rng,
        );
        let reduce_bn = BatchNorm2d::new(&format!("{name}.bn1"), c[0].out_channels, slots);
        let spatial = Conv2d::new(
            &format!("{name}.conv2"),
            c[1].in_channels,
            c[1].out_channels,
            3,
            spec.stride,
            slots,
            rng,
        );
        let spatial_bn = BatchNorm2d::new(&format!("{name}.bn2"), c[1].out_channels, slots);
        let restore = Conv2d::new(
            &format!("{name}.conv3"),
            c[2].in_channels,
            c[2].out_channels,
            1,
            1,
            slots,
            rng,
        );
        let restore_bn = BatchNorm2d::new(&format!("{name}.bn3"), c[2].out_channels, slots);
        let shortcut = match spec.kind {
            BlockKind::Connection => Some(Projection {
                conv: Conv2d::new(
                    &format!("{name}.shortcut.conv"),
                    spec.in_channels(),
                    spec.out_channels(),
                    1,
                    spec.stride,
                    slots,
                    rng,
                ),
                bn: BatchNorm2d::new(&format!("{name}.shortcut.bn"), spec.out_channels(), slots),
            }),
            _ => None,
        };
        ResidualBlock {
            spec,
            reduce,
            reduce_bn,
            spatial,
            spatial_bn,
            restore,
            restore_bn,
            shortcut,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.spec.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels()
    }

    /// The `1x1 -> 3x3 -> 1x1` branch, ending at the last BN (no ReLU).
    pub fn branch(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.reduce.forward(s, x)?;
        let h = self.reduce_bn.forward(s, h)?;
        let h = s.graph.relu(h)?;
        let h = self.spatial.forward(s, h)?;
        let h = self.spatial_bn.forward(s, h)?;
        let h = s.graph.relu(h)?;
        let h = self.restore.forward(s, h)?;
        self.restore_bn.forward(s, h)
    }

    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let channels = s.graph.shape(x).get(1).copied();
        if channels != Some(self.in_channels()) {
            return Err(Error::Shape(format!(
                "{:?} block expects {} channels, got {:?}",
                self.spec.kind,
                self.in_channels(),
                s.graph.shape(x)
            )));
        }
        let branch = self.branch(s, x)?;
        let skip = match &self.shortcut {
            Some(p) => {
                let h = p.conv.forward(s, x)?;
                p.bn.forward(s, h)?
            }
            None => x,
        };
        let sum = s.graph.add(branch, skip)?;
        s.graph.relu(sum)
    }

    pub fn convs(&self) -> Vec<&Conv2d<T>> {
        let mut v = vec![&self.reduce, &self.spatial, &self.restore];
        if let Some(p) = &self.shortcut {
            v.push(&p.conv);
        }
        v
    }

    pub fn norms(&self) -> Vec<&BatchNorm2d<T>> {
        let mut v = vec![&self.reduce_bn, &self.spatial_bn, &self.restore_bn];
        if let Some(p) = &self.shortcut {
            v.push(&p.bn);
        }
        v
    }

    pub(crate) fn norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut v = vec![&mut self.reduce_bn, &mut self.spatial_bn, &mut self.restore_bn];
        if let Some(p) = &mut self.shortcut {
            v.push(&mut p.bn);
        }
        v
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![
            &mut self.reduce.weight,
            &mut self.reduce_bn.gamma,
            &mut self.reduce_bn.beta,
            &mut self.spatial.weight,
            &mut self.spatial_bn.gamma,
            &mut self.spatial_bn.beta,
            &mut self.restore.weight,
            &mut self.restore_bn.gamma,
            &mut self.restore_bn.beta,
        ];
        if let Some(p) = &mut self.shortcut {
            v.push(&mut p.conv.weight);
            v.push(&mut p.bn.gamma);
            v.push(&mut p.bn.beta);
        }
        v
    }
}
