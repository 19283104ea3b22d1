//! Per-channel batch normalization over `(B, H, W)`.

use super::graph::{GradSink, Op};
use super::{Graph, Real, Var};
use crate::error::{Error, Result};

/// Batch statistics observed by a training-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

impl<T: Real> Graph<T> {
    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::Shape(format!("batch_norm expects 4-d input, got {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batch_norm affine params must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((xs[0], c, xs[2] * xs[3]))
    }

    /// Normalizes with the statistics of this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (b, c, hw) = self.bn_dims(x, gamma, beta)?;
        let xv = self.value(x);
        let count = b * hw;
        let inv_count = T::one() / T::from_usize_lossy(count);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for n in 0..b {
                s += xv[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let m = s * inv_count;
            let mut v = T::zero();
            for n in 0..b {
                for &val in &xv[(n * c + ch) * hw..(n * c + ch + 1) * hw] {
                    let d = val - m;
                    v += d * d;
                }
            }
            mean[ch] = m;
            var[ch] = v * inv_count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, b, c, hw);
        let shape = self.shape(x).to_vec();
        let y = self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            "batch_norm",
        )?;
        Ok((y, BatchStats { mean, var, count }))
    }

    /// Normalizes with externally supplied (running) statistics.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (b, c, hw) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!(
                "running stats of length {}/{} for {c} channels",
                mean.len(),
                var.len()
            )));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std, b, c, hw);
        let shape = self.shape(x).to_vec();
        self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            "batch_norm",
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        b: usize,
        c: usize,
        hw: usize,
    ) -> (Vec<T>, Vec<T>) {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        for n in 0..b {
            for ch in 0..c {
                let r = (n * c + ch) * hw..(n * c + ch + 1) * hw;
                for ((o, h), &v) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&xv[r]) {
                    *h = (v - mean[ch]) * inv_std[ch];
                    *o = gv[ch] * *h + bv[ch];
                }
            }
        }
        (out, xhat)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn batch_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        train: bool,
        g: &[T],
        sink: &mut GradSink<'_, T>,
    ) {
        let xs = self.shape(x);
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let gv = self.value(gamma);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for n in 0..b {
            for ch in 0..c {
                let r = (n * c + ch) * hw..(n * c + ch + 1) * hw;
                for (&dy, &h) in g[r.clone()].iter().zip(&xhat[r]) {
                    dgamma[ch] += dy * h;
                    dbeta[ch] += dy;
                }
            }
        }
        if sink.wants(x) {
            let mut dx = vec![T::zero(); g.len()];
            let count = T::from_usize_lossy(b * hw);
            for n in 0..b {
                for ch in 0..c {
                    let r = (n * c + ch) * hw..(n * c + ch + 1) * hw;
                    let scale = gv[ch] * inv_std[ch];
                    for ((d, &dy), &h) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                        *d = if train {
                            scale * (dy - (dbeta[ch] + h * dgamma[ch]) / count)
                        } else {
                            scale * dy
                        };
                    }
                }
            }
            sink.add(x, dx);
        }
        sink.add(gamma, dgamma);
        sink.add(beta, dbeta);
    }
}
