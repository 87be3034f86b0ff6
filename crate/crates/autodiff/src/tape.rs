//! Operation tape for reverse-mode differentiation.
//!
//! Every layer call evaluates eagerly and appends one node to the tape. Node
//! inputs always refer to earlier nodes, so the record is acyclic by
//! construction and `backward` is a single reverse sweep.
//!
//! Max-style reductions (`maxpool2d`, `adaptive_maxpool2d`, `segment_max`)
//! route the whole adjoint to the lowest-index maximal element of each
//! window. Window elements are scanned in row-major order, segment members in
//! increasing row order.

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{adaptive_bin, col2im, gemm, im2col};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    AdaptiveMaxPool2d { x: Var, argmax: Vec<u32> },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { x: Var, index: Vec<usize> },
    SegmentMax { x: Var, source_row: Vec<Option<u32>> },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    CrossEntropy { log_q: Var, target: Tensor },
    OverrideRows { x: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-owner computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(layer: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(layer, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(layer: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => shape_err(layer, format!("expected a matrix, got {s:?}")),
    }
}

fn image_dims(layer: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => shape_err(layer, format!("expected [N, C, H, W], got {s:?}")),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn parameter(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `x [N, in] · wᵀ + b` with `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const L: &str = "linear";
        let (n, fan_in) = matrix_dims(L, self.value(x))?;
        let (out, w_in) = match *self.value(w).shape() {
            [o, i] => (o, i),
            ref s => return shape_err(L, format!("weight must be [out, in], got {s:?}")),
        };
        if w_in != fan_in {
            return shape_err(L, format!("input width {fan_in} vs weight width {w_in}"));
        }
        if self.value(b).shape() != [out] {
            return shape_err(L, format!("bias {:?} vs out {out}", self.value(b).shape()));
        }
        let mut y = vec![0.0; n * out];
        for row in y.chunks_mut(out) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            n,
            fan_in,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut y,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![n, out], y)?, Op::Linear { x, w, b }, rg))
    }

    /// Stride-1 unpadded convolution: `x [N, C, H, W]`, `w [F, C, k, k]`, `b [F]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const L: &str = "conv2d";
        let [n, c, h, wd] = image_dims(L, self.value(x))?;
        let (f, k) = match *self.value(w).shape() {
            [f, wc, k1, k2] if wc == c && k1 == k2 => (f, k1),
            ref s => {
                return shape_err(L, format!("kernel {s:?} incompatible with {c} input channels"))
            }
        };
        if k == 0 || k > h || k > wd {
            return shape_err(L, format!("kernel {k} does not fit a {h}x{wd} input"));
        }
        if self.value(b).shape() != [f] {
            return shape_err(L, format!("bias {:?} vs {f} filters", self.value(b).shape()));
        }
        let (ho, wo) = (h - k + 1, wd - k + 1);
        let p = ho * wo;
        let ck = c * k * k;
        let mut cols = vec![0.0; ck * p];
        let mut y = vec![0.0; n * f * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        for img in 0..n {
            im2col(&xv[img * c * h * wd..(img + 1) * c * h * wd], c, h, wd, k, &mut cols);
            let out = &mut y[img * f * p..(img + 1) * f * p];
            for (fi, plane) in out.chunks_mut(p).enumerate() {
                plane.fill(bv[fi]);
            }
            gemm(f, ck, p, wv, false, &cols, false, 1.0, out);
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![n, f, ho, wo], y)?, Op::Conv2d { x, w, b }, rg))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        const L: &str = "maxpool2d";
        let [n, c, h, w] = image_dims(L, self.value(x))?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return shape_err(L, format!("{h}x{w} input is too small for a 2x2 window"));
        }
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    y.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, c, ho, wo], y)?,
            Op::MaxPool2d { x, argmax },
            rg,
        ))
    }

    /// Max pooling onto a fixed `out_h x out_w` grid of (possibly overlapping)
    /// bins. `(1, 1)` is a global max over each channel.
    pub fn adaptive_maxpool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const L: &str = "adaptive_maxpool2d";
        let [n, c, h, w] = image_dims(L, self.value(x))?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return shape_err(L, format!("cannot pool {h}x{w} onto {out_h}x{out_w}"));
        }
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(n * c * out_h * out_w);
        let mut argmax = Vec::with_capacity(n * c * out_h * out_w);
        for plane in 0..n * c {
            let base = plane * h * w;
            for by in 0..out_h {
                let (y0, y1) = adaptive_bin(by, out_h, h);
                for bx in 0..out_w {
                    let (x0, x1) = adaptive_bin(bx, out_w, w);
                    let mut best = base + y0 * w + x0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let idx = base + yy * w + xx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, c, out_h, out_w], y)?,
            Op::AdaptiveMaxPool2d { x, argmax },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = t.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), y).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x);
        let y = t
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), y).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    /// Concatenates along axis 1 after flattening all trailing axes, giving
    /// a `[N, sum of widths]` matrix.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        const L: &str = "concat";
        let Some(first) = parts.first() else {
            return shape_err(L, "no inputs");
        };
        let rows = self.value(*first).rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if r != rows {
                return shape_err(L, format!("row count {r} vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                y.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], y)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks along axis 0; all trailing shapes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        const L: &str = "concat_rows";
        let Some(first) = parts.first() else {
            return shape_err(L, "no inputs");
        };
        let tail = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut y = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return shape_err(L, format!("{:?} vs trailing {tail:?}", t.shape()));
            }
            rows += t.shape()[0];
            y.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of `x` (axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        const L: &str = "gather_rows";
        let t = self.value(x);
        if t.shape().is_empty() {
            return shape_err(L, "cannot gather from a scalar");
        }
        let (rows, cols) = (t.shape()[0], t.rows_cols().1);
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return shape_err(L, format!("row {bad} out of range for {rows} rows"));
        }
        let mut y = Vec::with_capacity(index.len() * cols);
        for &i in index {
            y.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Element-wise max over the rows of `x [E, D]` grouped by `segment`,
    /// giving `[num_segments, D]`. Empty segments yield zeros.
    pub fn segment_max(&mut self, x: Var, segment: &[usize], num_segments: usize) -> Result<Var> {
        self.segment_max_or(x, segment, num_segments, 0.0)
    }

    /// [`Tape::segment_max`] with an explicit value for empty segments.
    pub fn segment_max_or(
        &mut self,
        x: Var,
        segment: &[usize],
        num_segments: usize,
        empty: f64,
    ) -> Result<Var> {
        const L: &str = "elementwise_max_reduce";
        let (rows, d) = matrix_dims(L, self.value(x))?;
        if segment.len() != rows {
            return shape_err(L, format!("{} segment ids for {rows} rows", segment.len()));
        }
        if let Some(bad) = segment.iter().find(|&&s| s >= num_segments) {
            return shape_err(L, format!("segment {bad} >= {num_segments}"));
        }
        let xv = self.value(x).data();
        let mut source_row: Vec<Option<u32>> = vec![None; num_segments * d];
        for (r, &s) in segment.iter().enumerate() {
            for j in 0..d {
                let slot = &mut source_row[s * d + j];
                match *slot {
                    Some(prev) if xv[prev as usize * d + j] >= xv[r * d + j] => {}
                    _ => *slot = Some(r as u32),
                }
            }
        }
        let y = source_row
            .iter()
            .enumerate()
            .map(|(i, src)| src.map_or(empty, |r| xv[r as usize * d + i % d]))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![num_segments, d], y)?,
            Op::SegmentMax { x, source_row },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, cols) = matrix_dims("softmax", t)?;
        let mut y = t.data().to_vec();
        for row in y.chunks_mut(cols.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, cols) = matrix_dims("log_softmax", t)?;
        let mut y = t.data().to_vec();
        for row in y.chunks_mut(cols.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", t.shape()));
        }
        let out = t.reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let y = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| p + q)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let y = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| p * q)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// `-Σ target · log_q`, a scalar. `target` is a constant of the same shape.
    pub fn cross_entropy(&mut self, log_q: Var, target: Tensor) -> Result<Var> {
        same_shape("cross_entropy", self.value(log_q), &target)?;
        let s: f64 = self
            .value(log_q)
            .data()
            .iter()
            .zip(target.data())
            .filter(|(_, &t)| t != 0.0)
            .map(|(l, t)| -t * l)
            .sum();
        let rg = self.rg(&[log_q]);
        Ok(self.push(Tensor::scalar(s), Op::CrossEntropy { log_q, target }, rg))
    }

    /// Copies `x` with the listed rows replaced by the rows of `values`.
    /// Replaced rows are constants and block the adjoint.
    pub fn override_rows(&mut self, x: Var, rows: &[usize], values: &Tensor) -> Result<Var> {
        const L: &str = "override_rows";
        let t = self.value(x);
        let (n, cols) = matrix_dims(L, t)?;
        let (vr, vc) = matrix_dims(L, values)?;
        if vr != rows.len() || vc != cols {
            return shape_err(L, format!("values {vr}x{vc} for {} rows of width {cols}", rows.len()));
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return shape_err(L, format!("row {bad} out of range for {n} rows"));
        }
        let mut y = t.data().to_vec();
        for (i, &r) in rows.iter().enumerate() {
            y[r * cols..(r + 1) * cols].copy_from_slice(&values.data()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new(t.shape().to_vec(), y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::OverrideRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = make();
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, fan_in) = xv.rows_cols();
                let out = wv.shape()[0];
                self.accumulate(grads, *x, || {
                    let mut dx = vec![0.0; n * fan_in];
                    gemm(n, out, fan_in, gd, false, wv.data(), false, 0.0, &mut dx);
                    Tensor::new(xv.shape().to_vec(), dx).expect("shape")
                });
                self.accumulate(grads, *w, || {
                    let mut dw = vec![0.0; out * fan_in];
                    gemm(out, n, fan_in, gd, true, xv.data(), false, 0.0, &mut dw);
                    Tensor::new(wv.shape().to_vec(), dw).expect("shape")
                });
                self.accumulate(grads, *b, || {
                    let mut db = vec![0.0; out];
                    for row in gd.chunks(out) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    Tensor::from_vec(db)
                });
            }
            Op::Conv2d { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let [n, c, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
                let f = wv.shape()[0];
                let k = wv.shape()[2];
                let p = (h - k + 1) * (wd - k + 1);
                let ck = c * k * k;
                let need_x = self.wants(*x);
                let need_w = self.wants(*w);
                let mut dx = if need_x { vec![0.0; xv.numel()] } else { Vec::new() };
                let mut dw = vec![0.0; if need_w { wv.numel() } else { 0 }];
                let mut cols = vec![0.0; ck * p];
                let mut dcols = vec![0.0; if need_x { ck * p } else { 0 }];
                let img_len = c * h * wd;
                for img in 0..n {
                    let gout = &gd[img * f * p..(img + 1) * f * p];
                    if need_w {
                        im2col(&xv.data()[img * img_len..(img + 1) * img_len], c, h, wd, k, &mut cols);
                        gemm(f, p, ck, gout, false, &cols, true, 1.0, &mut dw);
                    }
                    if need_x {
                        gemm(ck, f, p, wv.data(), true, gout, false, 0.0, &mut dcols);
                        col2im(&dcols, c, h, wd, k, &mut dx[img * img_len..(img + 1) * img_len]);
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, || Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
                }
                if need_w {
                    self.accumulate(grads, *w, || Tensor::new(wv.shape().to_vec(), dw).expect("shape"));
                }
                self.accumulate(grads, *b, || {
                    let mut db = vec![0.0; f];
                    for (i, plane) in gd.chunks(p).enumerate() {
                        db[i % f] += plane.iter().sum::<f64>();
                    }
                    Tensor::from_vec(db)
                });
            }
            Op::MaxPool2d { x, argmax } | Op::AdaptiveMaxPool2d { x, argmax } => {
                self.accumulate(grads, *x, || {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let d = dx.data_mut();
                    for (&src, gv) in argmax.iter().zip(gd) {
                        d[src as usize] += gv;
                    }
                    dx
                });
            }
            Op::Relu { x } => {
                self.accumulate(grads, *x, || {
                    let xv = self.value(*x);
                    let d = xv
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    Tensor::new(xv.shape().to_vec(), d).expect("shape")
                });
            }
            Op::LeakyRelu { x, slope } => {
                self.accumulate(grads, *x, || {
                    let xv = self.value(*x);
                    let d = xv
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv })
                        .collect();
                    Tensor::new(xv.shape().to_vec(), d).expect("shape")
                });
            }
            Op::ConcatCols { parts } => {
                let (rows, total) = g.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let width = pv.rows_cols().1;
                    self.accumulate(grads, p, || {
                        let mut d = Vec::with_capacity(rows * width);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + width]);
                        }
                        Tensor::new(pv.shape().to_vec(), d).expect("shape")
                    });
                    offset += width;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.numel();
                    self.accumulate(grads, p, || {
                        Tensor::new(pv.shape().to_vec(), gd[offset..offset + len].to_vec())
                            .expect("shape")
                    });
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                self.accumulate(grads, *x, || {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let cols = dx.rows_cols().1;
                    let d = dx.data_mut();
                    for (k, &i) in index.iter().enumerate() {
                        for j in 0..cols {
                            d[i * cols + j] += gd[k * cols + j];
                        }
                    }
                    dx
                });
            }
            Op::SegmentMax { x, source_row } => {
                self.accumulate(grads, *x, || {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let cols = dx.rows_cols().1;
                    let d = dx.data_mut();
                    for (i, src) in source_row.iter().enumerate() {
                        if let Some(r) = src {
                            d[*r as usize * cols + i % cols] += gd[i];
                        }
                    }
                    dx
                });
            }
            Op::Softmax { x } => {
                self.accumulate(grads, *x, || {
                    let y = node.value.data();
                    let cols = node.value.shape().last().copied().unwrap_or(1).max(1);
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(gd.chunks(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    Tensor::new(node.value.shape().to_vec(), d).expect("shape")
                });
            }
            Op::LogSoftmax { x } => {
                self.accumulate(grads, *x, || {
                    let y = node.value.data();
                    let cols = node.value.shape().last().copied().unwrap_or(1).max(1);
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(gd.chunks(cols)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    Tensor::new(node.value.shape().to_vec(), d).expect("shape")
                });
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, || {
                    g.reshape(self.value(*x).shape()).expect("shape")
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.clone());
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(grads, *a, || {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(av.shape().to_vec(), d).expect("shape")
                });
                self.accumulate(grads, *b, || {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(bv.shape().to_vec(), d).expect("shape")
                });
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, || Tensor::full(self.value(*x).shape(), gd[0]));
            }
            Op::CrossEntropy { log_q, target } => {
                self.accumulate(grads, *log_q, || {
                    let d = target.data().iter().map(|t| -t * gd[0]).collect();
                    Tensor::new(target.shape().to_vec(), d).expect("shape")
                });
            }
            Op::OverrideRows { x, rows } => {
                self.accumulate(grads, *x, || {
                    let mut dx = g.clone();
                    let cols = dx.rows_cols().1;
                    for &r in rows {
                        dx.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
                    }
                    dx
                });
            }
        }
    }
}
