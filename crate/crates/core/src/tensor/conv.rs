//! Bias-free 2-D convolution (im2col + gemm) and average pooling.

use super::graph::{GradSink, Op};
use super::{gemm, Graph, Real, Var};
use crate::error::{Error, Result};

/// Resolved shapes of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `floor((size + 2 pad - kernel) / stride) + 1`, or `None` if the window
/// does not fit.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || size + 2 * pad < kernel {
        return None;
    }
    Some((size + 2 * pad - kernel) / stride + 1)
}

impl ConvGeometry {
    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_area(&self) -> usize {
        self.in_h * self.in_w
    }

    /// Output columns `lo..hi` whose input column `ox * stride + kx - pad`
    /// lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.in_w + self.pad > kx {
            ((self.in_w - 1 + self.pad - kx) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.stride + ky;
        (iy >= self.pad && iy - self.pad < self.in_h).then(|| iy - self.pad)
    }

    /// Unfolds one image `[Cin, H, W]` into `[Cin*k*k, Ho*Wo]`.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let area = self.out_area();
        for c in 0..self.in_channels {
            let plane = &x[c * self.in_area()..(c + 1) * self.in_area()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * area..(row + 1) * area];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        let Some(iy) = self.in_row(oy, ky) else {
                            line.fill(T::zero());
                            continue;
                        };
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo == hi {
                            continue;
                        }
                        let first = lo * self.stride + kx - self.pad;
                        let src = &plane[iy * self.in_w + first..(iy + 1) * self.in_w];
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[..hi - lo]);
                        } else {
                            for (slot, v) in line[lo..hi].iter_mut().zip(src.iter().step_by(self.stride)) {
                                *slot = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds `[Cin*k*k, Ho*Wo]` back into one image, summing overlaps.
    fn col2im_add<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let k = self.kernel;
        let area = self.out_area();
        for c in 0..self.in_channels {
            let plane = &mut x[c * self.in_area()..(c + 1) * self.in_area()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * area..(row + 1) * area];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo == hi {
                        continue;
                    }
                    for oy in 0..self.out_h {
                        let Some(iy) = self.in_row(oy, ky) else { continue };
                        let first = lo * self.stride + kx - self.pad;
                        let line = &mut plane[iy * self.in_w + first..(iy + 1) * self.in_w];
                        let s = &src[oy * self.out_w + lo..oy * self.out_w + hi];
                        if self.stride == 1 {
                            for (d, v) in line[..s.len()].iter_mut().zip(s) {
                                *d += *v;
                            }
                        } else {
                            for (d, v) in line.iter_mut().step_by(self.stride).zip(s) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin || kh != kw {
            return Err(Error::Shape(format!(
                "conv2d weight {ws:?} incompatible with input {xs:?}"
            )));
        }
        let (Some(out_h), Some(out_w)) = (conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad)) else {
            return Err(Error::Shape(format!(
                "conv2d window {kh}x{kw} (stride {stride}, pad {pad}) does not fit {h}x{wd}"
            )));
        };
        let geom = ConvGeometry {
            batch,
            in_channels: cin,
            out_channels: cout,
            kernel: kh,
            stride,
            pad,
            in_h: h,
            in_w: wd,
            out_h,
            out_w,
        };

        let xv = self.value(x);
        let wv = self.value(w);
        let in_len = cin * h * wd;
        let out_len = cout * geom.out_area();
        let mut out = vec![T::zero(); batch * out_len];
        let mut cols = if geom.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); geom.patch_len() * geom.out_area()]
        };
        for b in 0..batch {
            let xb = &xv[b * in_len..(b + 1) * in_len];
            let ob = &mut out[b * out_len..(b + 1) * out_len];
            if geom.pointwise() {
                gemm(cout, cin, geom.out_area(), wv, false, xb, false, ob, false);
            } else {
                geom.im2col(xb, &mut cols);
                gemm(
                    cout,
                    geom.patch_len(),
                    geom.out_area(),
                    wv,
                    false,
                    &cols,
                    false,
                    ob,
                    false,
                );
            }
        }
        self.push(
            vec![batch, cout, out_h, out_w],
            out,
            Op::Conv2d { x, w, geom },
            "conv2d",
        )
    }

    pub(crate) fn conv2d_backward(&self, x: Var, w: Var, geom: &ConvGeometry, g: &[T], sink: &mut GradSink<'_, T>) {
        let xv = self.value(x);
        let wv = self.value(w);
        let in_len = geom.in_channels * geom.in_area();
        let out_len = geom.out_channels * geom.out_area();
        let patch = geom.patch_len();
        let area = geom.out_area();

        if sink.wants(w) {
            let mut dw = vec![T::zero(); geom.out_channels * patch];
            let mut cols = vec![T::zero(); if geom.pointwise() { 0 } else { patch * area }];
            for b in 0..geom.batch {
                let xb = &xv[b * in_len..(b + 1) * in_len];
                let gb = &g[b * out_len..(b + 1) * out_len];
                let src: &[T] = if geom.pointwise() {
                    xb
                } else {
                    geom.im2col(xb, &mut cols);
                    &cols
                };
                gemm(geom.out_channels, area, patch, gb, false, src, true, &mut dw, true);
            }
            sink.add(w, dw);
        }

        if sink.wants(x) {
            let mut dx = vec![T::zero(); geom.batch * in_len];
            let mut dcols = vec![T::zero(); patch * area];
            for b in 0..geom.batch {
                let gb = &g[b * out_len..(b + 1) * out_len];
                let dxb = &mut dx[b * in_len..(b + 1) * in_len];
                if geom.pointwise() {
                    gemm(patch, geom.out_channels, area, wv, true, gb, false, dxb, true);
                } else {
                    gemm(patch, geom.out_channels, area, wv, true, gb, false, &mut dcols, false);
                    geom.col2im_add(&dcols, dxb);
                }
            }
            sink.add(x, dx);
        }
    }

    /// Mean over `kernel x kernel` windows with the given stride (no padding).
    pub fn avgpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::Shape(format!("avgpool2d expects 4-d input, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (Some(oh), Some(ow)) = (conv_out_size(h, kernel, stride, 0), conv_out_size(w, kernel, stride, 0)) else {
            return Err(Error::Shape(format!(
                "pooling window {kernel} larger than input {h}x{w}"
            )));
        };
        let xv = self.value(x);
        let norm = T::one() / T::from_usize_lossy(kernel * kernel);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for p in 0..b * c {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..kernel {
                        let row = &plane[(oy * stride + ky) * w..];
                        for kx in 0..kernel {
                            acc += row[ox * stride + kx];
                        }
                    }
                    dst[oy * ow + ox] = acc * norm;
                }
            }
        }
        self.push(
            vec![b, c, oh, ow],
            out,
            Op::AvgPool2d { x, kernel, stride },
            "avgpool2d",
        )
    }

    pub(crate) fn avgpool2d_backward(
        &self,
        x: Var,
        kernel: usize,
        stride: usize,
        out: Var,
        g: &[T],
        sink: &mut GradSink<'_, T>,
    ) {
        if !sink.wants(x) {
            return;
        }
        let xs = self.shape(x);
        let (h, w) = (xs[2], xs[3]);
        let os = self.shape(out);
        let (oh, ow) = (os[2], os[3]);
        let planes = xs[0] * xs[1];
        let norm = T::one() / T::from_usize_lossy(kernel * kernel);
        let mut dx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            let src = &g[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = src[oy * ow + ox] * norm;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            dst[(oy * stride + ky) * w + ox * stride + kx] += d;
                        }
                    }
                }
            }
        }
        sink.add(x, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn output_size_arithmetic() {
        assert_eq!(conv_out_size(50, 3, 2, 1), Some(25));
        assert_eq!(conv_out_size(20, 3, 2, 1), Some(10));
        assert_eq!(conv_out_size(25, 3, 2, 1), Some(13));
        assert_eq!(conv_out_size(10, 3, 2, 1), Some(5));
        assert_eq!(conv_out_size(101, 2, 2, 0), Some(50));
        assert_eq!(conv_out_size(2, 3, 1, 0), None);
    }

    #[test]
    fn pointwise_identity_kernel_is_identity() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..2 * 3 * 4 * 5).map(|i| i as f32 * 0.1 - 3.0).collect();
        let x = g.constant(vec![2, 3, 4, 5], data.clone()).unwrap();
        let mut eye = vec![0.0f32; 9];
        for c in 0..3 {
            eye[c * 3 + c] = 1.0;
        }
        let w = g.constant(vec![3, 3, 1, 1], eye).unwrap();
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y), data.as_slice());
    }

    #[test]
    fn strided_output_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&Tensor::zeros(vec![1, 2, 50, 20]));
        let w = g.leaf(&Tensor::zeros(vec![4, 2, 3, 3]));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 25, 10]);
    }

    #[test]
    fn pooling_means() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = g.avgpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y), &[2.5]);

        let c = g.leaf(&Tensor::full(vec![2, 3, 7, 6], 1.75));
        let y = g.avgpool2d(c, 2, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 3, 3]);
        assert!(g.value(y).iter().all(|&v| v == 1.75));
    }

    #[test]
    fn pooling_window_too_large() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&Tensor::zeros(vec![1, 1, 1, 4]));
        assert!(g.avgpool2d(x, 2, 2).is_err());
    }

    #[test]
    fn weight_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&Tensor::zeros(vec![1, 2, 5, 5]));
        let w = g.leaf(&Tensor::zeros(vec![4, 3, 3, 3]));
        assert!(g.conv2d(x, w, 1, 1).is_err());
    }
}
