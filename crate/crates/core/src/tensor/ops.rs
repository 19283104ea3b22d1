//! Elementwise, dense-algebra and loss operations.

use super::graph::{GradSink, Op};
use super::{gemm, Graph, Real, Var};
use crate::error::{Error, Result};

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / last.max(1), last)
}

impl<T: Real> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu { x }, "relu")
    }

    pub(crate) fn relu_backward(&self, x: Var, out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        if !sink.wants(x) {
            return;
        }
        let y = self.value(out);
        let dx = g
            .iter()
            .zip(y)
            .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
            .collect();
        sink.add(x, dx);
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p * q).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Mul { a, b }, "mul")
    }

    pub(crate) fn mul_backward(&self, a: Var, b: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let (av, bv) = (self.value(a), self.value(b));
        if sink.wants(a) {
            sink.add(a, g.iter().zip(bv).map(|(&d, &q)| d * q).collect());
        }
        if sink.wants(b) {
            sink.add(b, g.iter().zip(av).map(|(&d, &p)| d * p).collect());
        }
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!(
                "scale factor must hold one value, got {:?}",
                self.shape(s)
            )));
        }
        let k = self.value(s)[0];
        let out = self.value(x).iter().map(|&v| v * k).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, s }, "scale")
    }

    pub(crate) fn scale_backward(&self, x: Var, s: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let k = self.value(s)[0];
        if sink.wants(x) {
            sink.add(x, g.iter().map(|&d| d * k).collect());
        }
        if sink.wants(s) {
            let ds = g.iter().zip(self.value(x)).map(|(&d, &v)| d * v).sum();
            sink.add(s, vec![ds]);
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum { x }, "sum")
    }

    /// `y = x wᵀ (+ b)` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        let (rows, inf) = split_last(&xs);
        if ws.len() != 2 || ws[1] != inf {
            return Err(Error::Shape(format!("linear: weight {ws:?} for input {xs:?}")));
        }
        let outf = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [outf] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} for {outf} outputs",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![T::zero(); rows * outf];
        gemm(
            rows,
            inf,
            outf,
            self.value(x),
            false,
            self.value(w),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(outf) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty shape") = outf;
        self.push(shape, out, Op::Linear { x, w, b }, "linear")
    }

    pub(crate) fn linear_backward(&self, x: Var, w: Var, b: Option<Var>, g: &[T], sink: &mut GradSink<'_, T>) {
        let (rows, inf) = split_last(self.shape(x));
        let outf = self.shape(w)[0];
        if sink.wants(x) {
            let mut dx = vec![T::zero(); rows * inf];
            gemm(rows, outf, inf, g, false, self.value(w), false, &mut dx, false);
            sink.add(x, dx);
        }
        if sink.wants(w) {
            let mut dw = vec![T::zero(); outf * inf];
            gemm(outf, rows, inf, g, true, self.value(x), false, &mut dw, false);
            sink.add(w, dw);
        }
        if let Some(b) = b {
            if sink.wants(b) {
                let mut db = vec![T::zero(); outf];
                for row in g.chunks(outf) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                sink.add(b, db);
            }
        }
    }

    /// `y = x w` over the last axis of `x`; `w` is `[in, out]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        let (rows, k) = split_last(&xs);
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::Shape(format!("matmul: {xs:?} x {ws:?}")));
        }
        let n = ws[1];
        let mut out = vec![T::zero(); rows * n];
        gemm(rows, k, n, self.value(x), false, self.value(w), false, &mut out, false);
        let mut shape = xs;
        *shape.last_mut().expect("non-empty shape") = n;
        self.push(shape, out, Op::MatMul { x, w }, "matmul")
    }

    pub(crate) fn matmul_backward(&self, x: Var, w: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let (rows, k) = split_last(self.shape(x));
        let n = self.shape(w)[1];
        if sink.wants(x) {
            let mut dx = vec![T::zero(); rows * k];
            gemm(rows, n, k, g, false, self.value(w), true, &mut dx, false);
            sink.add(x, dx);
        }
        if sink.wants(w) {
            let mut dw = vec![T::zero(); k * n];
            gemm(k, rows, n, self.value(x), true, g, false, &mut dw, false);
            sink.add(w, dw);
        }
    }

    /// Batched product of `a: [B, M, K]` with `b: [B, K, N]`, or with
    /// `b: [B, N, K]` transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a);
        let bs = self.shape(b);
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Error::Shape(format!("bmm: {as_:?} x {bs:?}")));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (bk, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if bk != k {
            return Err(Error::Shape(format!(
                "bmm: inner dims {k} vs {bk} (trans_b = {trans_b})"
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push(vec![batch, m, n], out, Op::Bmm { a, b, trans_b }, "bmm")
    }

    pub(crate) fn bmm_backward(&self, a: Var, b: Var, trans_b: bool, g: &[T], sink: &mut GradSink<'_, T>) {
        let as_ = self.shape(a);
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let bs = self.shape(b);
        let n = if trans_b { bs[1] } else { bs[2] };
        let (av, bv) = (self.value(a), self.value(b));
        if sink.wants(a) {
            let mut da = vec![T::zero(); batch * m * k];
            for i in 0..batch {
                gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    !trans_b,
                    &mut da[i * m * k..(i + 1) * m * k],
                    false,
                );
            }
            sink.add(a, da);
        }
        if sink.wants(b) {
            let mut db = vec![T::zero(); batch * k * n];
            for i in 0..batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &av[i * m * k..(i + 1) * m * k];
                let dbi = &mut db[i * k * n..(i + 1) * k * n];
                if trans_b {
                    gemm(n, m, k, gi, true, ai, false, dbi, false);
                } else {
                    gemm(k, m, n, ai, true, gi, false, dbi, false);
                }
            }
            sink.add(b, db);
        }
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| xv[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        self.push(shape, out, Op::Softmax { x, axis }, "softmax")
    }

    pub(crate) fn softmax_backward(&self, x: Var, axis: usize, out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        if !sink.wants(x) {
            return;
        }
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        let y = self.value(out);
        let mut dx = vec![T::zero(); y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                for j in 0..len {
                    dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                }
            }
        }
        sink.add(x, dx);
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool expects 4-d input, got {xs:?}")));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let norm = T::one() / T::from_usize_lossy(hw);
        let out = self
            .value(x)
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * norm)
            .collect();
        self.push(vec![b, c], out, Op::GlobalAvgPool { x }, "global_avg_pool")
    }

    pub(crate) fn global_avg_pool_backward(&self, x: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        if !sink.wants(x) {
            return;
        }
        let xs = self.shape(x);
        let hw = xs[2] * xs[3];
        let norm = T::one() / T::from_usize_lossy(hw);
        let mut dx = Vec::with_capacity(xs.iter().product());
        for &d in g {
            dx.extend(std::iter::repeat(d * norm).take(hw));
        }
        sink.add(x, dx);
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {ls:?} for {} labels",
                labels.len()
            )));
        }
        let classes = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (r, (row, &label)) in lv.chunks(classes).zip(labels).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[label];
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        loss = loss / T::from_usize_lossy(labels.len());
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    pub(crate) fn cross_entropy_backward(
        &self,
        logits: Var,
        labels: &[usize],
        probs: &[T],
        g: &[T],
        sink: &mut GradSink<'_, T>,
    ) {
        if !sink.wants(logits) {
            return;
        }
        let classes = self.shape(logits)[1];
        let scale = g[0] / T::from_usize_lossy(labels.len());
        let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
        for (r, &label) in labels.iter().enumerate() {
            dx[r * classes + label] -= scale;
        }
        sink.add(logits, dx);
    }

    /// `[B, C, H, W] -> [B, H*W, C]`: one row of channels per spatial position.
    pub fn to_nodes(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::Shape(format!("to_nodes expects 4-d input, got {xs:?}")));
        }
        let (b, c, n) = (xs[0], xs[1], xs[2] * xs[3]);
        let out = transpose_batched(self.value(x), b, c, n);
        self.push(vec![b, n, c], out, Op::ToNodes { x }, "to_nodes")
    }

    pub(crate) fn to_nodes_backward(&self, x: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let xs = self.shape(x);
        let (b, c, n) = (xs[0], xs[1], xs[2] * xs[3]);
        sink.add(x, transpose_batched(g, b, n, c));
    }

    /// Inverse of [`Graph::to_nodes`]: `[B, H*W, C] -> [B, C, H, W]`.
    pub fn from_nodes(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || xs[1] != h * w {
            return Err(Error::Shape(format!("from_nodes: {xs:?} into {h}x{w}")));
        }
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        let out = transpose_batched(self.value(x), b, n, c);
        self.push(vec![b, c, h, w], out, Op::FromNodes { x }, "from_nodes")
    }

    pub(crate) fn from_nodes_backward(&self, x: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let xs = self.shape(x);
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        sink.add(x, transpose_batched(g, b, c, n));
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Transposes each of `batch` row-major `rows x cols` matrices.
fn transpose_batched<T: Copy>(src: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for b in 0..batch {
        let m = &src[b * rows * cols..(b + 1) * rows * cols];
        for c in 0..cols {
            out.extend((0..rows).map(|r| m[r * cols + c]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::full(vec![2, 5], 3.3));
        let y = g.softmax(x, 1).unwrap();
        assert!(g.value(y).iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::full(vec![2, 5], 1.0));
        assert!(matches!(g.softmax(x, 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut losses = Vec::new();
        for margin in [1.0, 5.0, 20.0, 80.0] {
            let mut g = Graph::<f64>::new();
            let mut row = vec![0.0; 12];
            row[3] = margin;
            let x = g.constant(vec![1, 12], row).unwrap();
            let l = g.cross_entropy(x, &[3]).unwrap();
            losses.push(g.value(l)[0]);
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
        assert!(losses[3] < 1e-30);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::zeros(vec![4, 12]));
        let l = g.cross_entropy(x, &[0, 5, 11, 2]).unwrap();
        assert!((g.value(l)[0] - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::zeros(vec![1, 12]));
        assert!(matches!(g.cross_entropy(x, &[12]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn node_layout_round_trips() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..2 * 3 * 2 * 2).map(|i| i as f32).collect();
        let x = g.constant(vec![2, 3, 2, 2], data.clone()).unwrap();
        let n = g.to_nodes(x).unwrap();
        assert_eq!(g.shape(n), &[2, 4, 3]);
        // node 1 of batch 0 holds channel values at spatial index 1
        assert_eq!(&g.value(n)[3..6], &[1.0, 5.0, 9.0]);
        let back = g.from_nodes(n, 2, 2).unwrap();
        assert_eq!(g.value(back), data.as_slice());
    }

    #[test]
    fn linear_adds_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = g.constant(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = g.constant(vec![3], vec![0.5, -0.5, 0.0]).unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &[1.5, 1.5, 3.0]);
    }
}
