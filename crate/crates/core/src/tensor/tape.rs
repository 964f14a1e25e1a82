use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::{numel, split_axis, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulTrailing(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Log(Var),
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        winners: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    AvgPool {
        x: Var,
        factor: usize,
    },
    Upsample {
        x: Var,
        rows: Vec<(usize, usize, T)>,
        cols: Vec<(usize, usize, T)>,
    },
    Reassemble {
        z: Var,
        kernels: Var,
        sigma: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Record of executed differentiable operations.
///
/// Values are immutable once recorded. [`Tape::backward`] walks the record
/// in reverse, visiting every node once, and accumulates gradients into the
/// leaves created with [`Tape::param`]. Calling `backward` twice without
/// [`Tape::zero_grad`] sums the two gradients.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += *d;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Bilinear sampling table for one axis, half-pixel centers.
fn bilinear_table<T: Real>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, T::lit(pos - i0 as f64))
        })
        .collect()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies the value of `v` into a fresh leaf that does not require grad.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` before backward or when the
    /// loss does not depend on it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        Ok(self.derived(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.derived(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.derived(value, Op::Reshape(a), &[a]))
    }

    /// Cross-correlation of `x[C×H×W]` with `kernel[O×C×k×k]` (no flip),
    /// zero padding on every side, optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] || sk[2] != sk[3] {
            return Err(Error::shape("conv2d", sx, sk));
        }
        let ksize = sk[2];
        if ksize % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel size {ksize} is not odd")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let out_c = sk[0];
        let span_h = (h + 2 * padding) as isize - ksize as isize;
        let span_w = (w + 2 * padding) as isize - ksize as isize;
        if span_h < 0 || span_w < 0 {
            return Err(Error::dim(
                "conv2d",
                format!("non-positive output size for input {sx:?}, kernel {ksize}, padding {padding}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_c] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[out_c]));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            ksize,
            stride,
            padding,
            out_h: span_h as usize / stride + 1,
            out_w: span_w as usize / stride + 1,
        };
        let p = geom.out_len();
        let cols = if ksize == 1 && stride == 1 && padding == 0 {
            Vec::new()
        } else {
            im2col(&geom, self.value(x).data())
        };
        let col_view: &[T] = if cols.is_empty() { self.value(x).data() } else { &cols };
        let mut out = vec![T::zero(); out_c * p];
        gemm_nn(out_c, geom.patch_len(), p, self.value(kernel).data(), col_view, &mut out);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (o, row) in out.chunks_mut(p).enumerate() {
                for v in row {
                    *v += bv[o];
                }
            }
        }
        let value = Tensor::from_parts(vec![out_c, geom.out_h, geom.out_w], out);
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.derived(
            value,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    // ---- elementwise ----

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.derived(value, Op::Relu(a), &[a])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.derived(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.derived(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.derived(v, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies `x` by `w`, broadcasting `w` over the leading axes of `x`.
    /// `w`'s shape must equal the trailing part of `x`'s shape.
    pub fn mul_trailing(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() > sx.len() || sx[sx.len() - sw.len()..] != *sw {
            return Err(Error::shape("mul_trailing", sx, sw));
        }
        let wv = self.value(w).data();
        let n = wv.len();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(wv).map(|(&a, &b)| a * b))
            .collect();
        let value = Tensor::from_parts(sx.to_vec(), data);
        Ok(self.derived(value, Op::MulTrailing(x, w), &[x, w]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.derived(value, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: T) -> Var {
        let value = self.value(a).map(|v| v + offset);
        self.derived(value, Op::AddScalar(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.ln());
        self.derived(value, Op::Log(a), &[a])
    }

    // ---- reductions ----

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.derived(value, Op::Sum(a), &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = split_axis("sum_axis", t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &src[(o * len + k) * inner..][..inner];
                for (d, &s) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.derived(Tensor::from_parts(shape, out), Op::SumAxis { x: a, axis }, &[a]))
    }

    /// Maximum along `axis`. The gradient goes to the first maximal entry.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let winners = t.argmax(axis)?;
        let (outer, len, inner) = split_axis("max_axis", t.shape(), axis)?;
        let src = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                out.push(src[(o * len + winners.data()[o * inner + i]) * inner + i]);
            }
        }
        let shape = winners.shape().to_vec();
        let value = Tensor::from_parts(shape, out);
        let winners = winners.into_data();
        Ok(self.derived(value, Op::MaxAxis { x: a, axis, winners }, &[a]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = split_axis("softmax", t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut mx = src[at(0)];
                for k in 1..len {
                    mx = mx.max(src[at(k)]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.derived(value, Op::Softmax { x: a, axis }, &[a]))
    }

    // ---- row-structured ----

    /// Scales every row of `x[N×D]` to unit length; rows whose norm is
    /// below `eps` are divided by `eps` instead.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim("normalize_rows", format!("expected rank 2, got {:?}", t.shape())));
        }
        let d = t.shape()[1];
        let mut norms = Vec::with_capacity(t.shape()[0]);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let norm = super::kernels::dot(row, row).sqrt().max(eps);
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.derived(value, Op::NormalizeRows { x, eps, norms }, &[x]))
    }

    /// Row `i` of the output is row `idx[i]` of `x[N×D]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim("gather_rows", format!("expected rank 2, got {:?}", t.shape())));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        if idx.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                bound: n,
            });
        }
        let src = t.data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_parts(vec![idx.len(), d], out);
        Ok(self.derived(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Concatenates along axis 0; trailing shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        if self.shape(*first).is_empty() {
            return Err(Error::dim("concat", "cannot concatenate scalars"));
        }
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.derived(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), parts))
    }

    // ---- spatial ----

    /// Non-overlapping `factor×factor` average pooling of `x[C×H×W]`.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || factor == 0 || !s[1].is_multiple_of(factor) || !s[2].is_multiple_of(factor) {
            return Err(Error::dim(
                "avg_pool",
                format!("shape {s:?} is not divisible by factor {factor}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / factor, w / factor);
        let src = self.value(x).data();
        let norm = T::lit(1.0 / (factor * factor) as f64);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * oh + y / factor) * ow + xx / factor] += src[(ch * h + y) * w + xx];
                }
            }
        }
        for v in &mut out {
            *v *= norm;
        }
        let value = Tensor::from_parts(vec![c, oh, ow], out);
        Ok(self.derived(value, Op::AvgPool { x, factor }, &[x]))
    }

    /// Bilinear resize of `x[C×h×w]` to `C×out_h×out_w` with half-pixel
    /// centers and edge clamping.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::dim("upsample_bilinear", format!("bad input {s:?} or target size")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let rows = bilinear_table::<T>(h, out_h);
        let cols = bilinear_table::<T>(w, out_w);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for &(y0, y1, fy) in &rows {
                for &(x0, x1, fx) in &cols {
                    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        let value = Tensor::from_parts(vec![c, out_h, out_w], out);
        Ok(self.derived(value, Op::Upsample { x, rows, cols }, &[x]))
    }

    /// Content-aware reassembly: for every cell `(m, n)` of the
    /// `(H/σ)×(W/σ)` grid, a weighted sum of the `k×k` neighbourhood of `z`
    /// centred at `(mσ + ⌊σ/2⌋, nσ + ⌊σ/2⌋)`, zero outside the map.
    ///
    /// `z` is `D×H×W`, `kernels` is `(H/σ)×(W/σ)×k×k`; the result holds one
    /// `D`-vector per cell, `[(H/σ)·(W/σ)] × D`, in row-major cell order.
    pub fn reassemble(&mut self, z: Var, kernels: Var, sigma: usize) -> Result<Var> {
        let (sz, sk) = (self.shape(z), self.shape(kernels));
        if sz.len() != 3
            || sk.len() != 4
            || sigma == 0
            || sk[2] != sk[3]
            || sk[2] % 2 == 0
            || sk[0] * sigma != sz[1]
            || sk[1] * sigma != sz[2]
        {
            return Err(Error::shape("reassemble", sz, sk));
        }
        let (d, h, w) = (sz[0], sz[1], sz[2]);
        let (gh, gw, k) = (sk[0], sk[1], sk[2]);
        let r = (k / 2) as isize;
        let zv = self.value(z).data();
        let kv = self.value(kernels).data();
        let mut out = vec![T::zero(); gh * gw * d];
        for m in 0..gh {
            for n in 0..gw {
                let cell = m * gw + n;
                let (cy, cx) = ((m * sigma + sigma / 2) as isize, (n * sigma + sigma / 2) as isize);
                let dst = &mut out[cell * d..(cell + 1) * d];
                for i in 0..k {
                    let y = cy + i as isize - r;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let x = cx + j as isize - r;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let wgt = kv[(cell * k + i) * k + j];
                        let off = y as usize * w + x as usize;
                        for (ch, o) in dst.iter_mut().enumerate() {
                            *o += wgt * zv[ch * h * w + off];
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![gh * gw, d], out);
        Ok(self.derived(value, Op::Reassemble { z, kernels, sigma }, &[z, kernels]))
    }

    // ---- backward ----

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[idx];
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    accumulate(&mut node.grad, g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, delta: Tensor<T>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], delta);
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, gd, tb.data(), &mut da);
                    send(*a, Tensor::from_parts(vec![m, k], da));
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, ta.data(), gd, &mut db);
                    send(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut da = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = gd[i * c + j];
                    }
                }
                send(*a, Tensor::from_parts(vec![c, r], da));
            }
            Op::Reshape(a) => {
                send(*a, Tensor::from_parts(self.shape(*a).to_vec(), gd.to_vec()));
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let out_c = out.shape()[0];
                let p = geom.out_len();
                let kl = geom.patch_len();
                let col_view: &[T] = if cols.is_empty() { self.value(*x).data() } else { cols };
                if wants(*kernel) {
                    let mut dk = vec![T::zero(); out_c * kl];
                    gemm_nt(out_c, p, kl, gd, col_view, &mut dk);
                    send(*kernel, Tensor::from_parts(self.shape(*kernel).to_vec(), dk));
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        let db = gd.chunks(p).map(|row| row.iter().copied().sum()).collect();
                        send(*b, Tensor::from_parts(vec![out_c], db));
                    }
                }
                if wants(*x) {
                    let mut dcols = vec![T::zero(); kl * p];
                    gemm_tn(kl, out_c, p, self.value(*kernel).data(), gd, &mut dcols);
                    let dx = if cols.is_empty() {
                        dcols
                    } else {
                        let mut dx = vec![T::zero(); geom.channels * geom.height * geom.width];
                        col2im(geom, &dcols, &mut dx);
                        dx
                    };
                    send(*x, Tensor::from_parts(self.shape(*x).to_vec(), dx));
                }
            }
            Op::Relu(a) => {
                let da = out
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                send(*a, Tensor::from_parts(out.shape().to_vec(), da));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis("softmax", out.shape(), *axis).expect("recorded axis");
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let mut inner_prod = T::zero();
                        for k in 0..len {
                            inner_prod += gd[at(k)] * y[at(k)];
                        }
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (gd[at(k)] - inner_prod);
                        }
                    }
                }
                send(*x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let da = gd.iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    send(*a, Tensor::from_parts(out.shape().to_vec(), da));
                }
                if wants(*b) {
                    let db = gd.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    send(*b, Tensor::from_parts(out.shape().to_vec(), db));
                }
            }
            Op::MulTrailing(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let n = tw.len();
                if wants(*x) {
                    let dx = gd
                        .chunks(n)
                        .flat_map(|row| row.iter().zip(tw.data()).map(|(&a, &b)| a * b))
                        .collect();
                    send(*x, Tensor::from_parts(tx.shape().to_vec(), dx));
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); n];
                    for (grow, xrow) in gd.chunks(n).zip(tx.data().chunks(n)) {
                        for ((d, &a), &b) in dw.iter_mut().zip(grow).zip(xrow) {
                            *d += a * b;
                        }
                    }
                    send(*w, Tensor::from_parts(tw.shape().to_vec(), dw));
                }
            }
            Op::Scale(a, factor) => send(*a, g.map(|v| v * *factor)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Log(a) => {
                let ta = self.value(*a);
                let da = gd.iter().zip(ta.data()).map(|(&gv, &x)| gv / x).collect();
                send(*a, Tensor::from_parts(ta.shape().to_vec(), da));
            }
            Op::Sum(a) => {
                let s = self.shape(*a).to_vec();
                let n = numel(&s);
                send(*a, Tensor::from_parts(s, vec![gd[0]; n]));
            }
            Op::SumAxis { x, axis } => {
                let s = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis("sum_axis", &s, *axis).expect("recorded axis");
                let mut dx = Vec::with_capacity(numel(&s));
                for o in 0..outer {
                    for _ in 0..len {
                        dx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                send(*x, Tensor::from_parts(s, dx));
            }
            Op::MaxAxis { x, axis, winners } => {
                let s = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis("max_axis", &s, *axis).expect("recorded axis");
                let mut dx = vec![T::zero(); numel(&s)];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = winners[o * inner + i];
                        dx[(o * len + k) * inner + i] += gd[o * inner + i];
                    }
                }
                send(*x, Tensor::from_parts(s, dx));
            }
            Op::NormalizeRows { x, eps, norms } => {
                let d = out.shape()[1];
                let y = out.data();
                let mut dx = Vec::with_capacity(y.len());
                for ((yrow, grow), &norm) in y.chunks(d).zip(gd.chunks(d)).zip(norms) {
                    if norm > *eps {
                        let proj = super::kernels::dot(yrow, grow);
                        dx.extend(yrow.iter().zip(grow).map(|(&yv, &gv)| (gv - yv * proj) / norm));
                    } else {
                        dx.extend(grow.iter().map(|&gv| gv / *eps));
                    }
                }
                send(*x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::GatherRows { x, idx } => {
                let s = self.shape(*x).to_vec();
                let d = s[1];
                let mut dx = vec![T::zero(); numel(&s)];
                for (row, &src) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[src * d + c] += gd[row * d + c];
                    }
                }
                send(*x, Tensor::from_parts(s, dx));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    send(p, Tensor::from_parts(self.shape(p).to_vec(), gd[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::AvgPool { x, factor } => {
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / factor, w / factor);
                let norm = T::lit(1.0 / (factor * factor) as f64);
                let mut dx = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx.push(gd[(ch * oh + y / factor) * ow + xx / factor] * norm);
                        }
                    }
                }
                send(*x, Tensor::from_parts(s, dx));
            }
            Op::Upsample { x, rows, cols } => {
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (rows.len(), cols.len());
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                    let gplane = &gd[ch * oh * ow..(ch + 1) * oh * ow];
                    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                            let gv = gplane[oy * ow + ox];
                            let top = gv * (T::one() - fy);
                            let bot = gv * fy;
                            plane[y0 * w + x0] += top * (T::one() - fx);
                            plane[y0 * w + x1] += top * fx;
                            plane[y1 * w + x0] += bot * (T::one() - fx);
                            plane[y1 * w + x1] += bot * fx;
                        }
                    }
                }
                send(*x, Tensor::from_parts(s, dx));
            }
            Op::Reassemble { z, kernels, sigma } => {
                let (sz, sk) = (self.shape(*z).to_vec(), self.shape(*kernels).to_vec());
                let (d, h, w) = (sz[0], sz[1], sz[2]);
                let (gh, gw, k) = (sk[0], sk[1], sk[2]);
                let r = (k / 2) as isize;
                let zv = self.value(*z).data();
                let kv = self.value(*kernels).data();
                let mut dz = vec![T::zero(); zv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                for m in 0..gh {
                    for n in 0..gw {
                        let cell = m * gw + n;
                        let (cy, cx) = ((m * sigma + sigma / 2) as isize, (n * sigma + sigma / 2) as isize);
                        let gcell = &gd[cell * d..(cell + 1) * d];
                        for i in 0..k {
                            let y = cy + i as isize - r;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for j in 0..k {
                                let x = cx + j as isize - r;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                let ki = (cell * k + i) * k + j;
                                let off = y as usize * w + x as usize;
                                let mut acc = T::zero();
                                for (ch, &gv) in gcell.iter().enumerate() {
                                    acc += gv * zv[ch * h * w + off];
                                    dz[ch * h * w + off] += kv[ki] * gv;
                                }
                                dk[ki] += acc;
                            }
                        }
                    }
                }
                send(*z, Tensor::from_parts(sz, dz));
                send(*kernels, Tensor::from_parts(sk, dk));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = tape.constant(t(&[2, 2], &[0.0, 0.0, 0.0, 1.0]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn conv2d_identity_and_zero_kernels() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(t(&[2, 3, 3], &data));
        // 1x1 identity over two channels
        let id = tape.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, id, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);

        let zero = tape.constant(Tensor::zeros(vec![3, 2, 3, 3]).unwrap());
        let y = tape.conv2d(x, zero, None, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(y), &[3, 3, 3]);
    }

    #[test]
    fn conv2d_rejects_empty_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 2]).unwrap());
        let k = tape.constant(Tensor::zeros(vec![1, 1, 5, 5]).unwrap());
        assert!(matches!(
            tape.conv2d(x, k, None, 1, 0),
            Err(Error::Dimension { .. })
        ));
        let k = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]).unwrap());
        assert!(tape.conv2d(x, k, None, 1, 0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![4]).unwrap());
        let s = tape.softmax(z, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);

        let big = tape.constant(t(&[2], &[1000.0, 0.0]));
        let s = tape.softmax(big, 0).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![3, 2]).unwrap());
        match tape.gather_rows(x, &[0, 3]) {
            Err(Error::Index { index, bound, .. }) => assert_eq!((index, bound), (3, 3)),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn backward_of_sum_is_ones_and_zero_scale_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let z = tape.scale(x, 0.0);
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn detached_copy_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.1, 0.2, 0.3]));
        let d = tape.detach(x);
        assert_eq!(tape.value(d).data(), tape.value(x).data());
        assert!(!tape.requires_grad(d));
        let y = tape.mul(d, d).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(d).is_none());
    }

    #[test]
    fn reassemble_identity_with_unit_kernels() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64).collect();
        let z = tape.constant(t(&[2, 3, 3], &data));
        let k = tape.constant(Tensor::full(vec![3, 3, 1, 1], 1.0).unwrap());
        let p = tape.reassemble(z, k, 1).unwrap();
        // p[cell, ch] == z[ch, cell]
        for cell in 0..9 {
            for ch in 0..2 {
                assert_eq!(tape.value(p).at(&[cell, ch]), data[ch * 9 + cell]);
            }
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 4, 4], 0.75f64).unwrap());
        let y = tape.upsample_bilinear(x, 16, 16).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }
}
