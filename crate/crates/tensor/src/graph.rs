//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] owns every intermediate value. Nodes are appended in
//! evaluation order, so the node vector is already a topological order and
//! backward is a single reverse sweep.

use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::real::gemm;
use crate::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution geometry. Padding is always "same" with zero fill, so the
/// output spatial size is `ceil(in / stride)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub stride: usize,
    pub dilation: usize,
}

impl Default for Conv2d {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dil: usize,
    oh: usize,
    ow: usize,
    pad_t: usize,
    pad_l: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for output `(oi, oj)` and kernel tap `(ki, kj)`.
    #[inline]
    fn src(&self, oi: usize, oj: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let r = (oi * self.stride + ki * self.dil) as isize - self.pad_t as isize;
        let c = (oj * self.stride + kj * self.dil) as isize - self.pad_l as isize;
        if r < 0 || c < 0 || r >= self.h as isize || c >= self.w as isize {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }
}

fn same_pad(len: usize, k: usize, stride: usize, dil: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let needed = (out - 1) * stride + (k - 1) * dil + 1;
    (out, needed.saturating_sub(len) / 2)
}

/// Per-axis linear interpolation taps under the half-pixel-center convention.
fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let lambda = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Resize {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Scale(Var, T),
    LocalAttention {
        x: Var,
        window: (usize, usize),
        weights: Vec<T>,
    },
    Bce {
        p: Var,
        target: Vec<T>,
        eps: T,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Recorded computation. Build one per forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is kept after [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    /// Softmax weights saved by a [`Graph::local_attention`] node, laid out
    /// `[position, window tap]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.node(v).op {
            Op::LocalAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn check_finite(&self, v: Var) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(format!(
                "node {} ({})",
                v.0,
                self.op_name(v)
            )))
        }
    }

    fn op_name(&self, v: Var) -> &'static str {
        match self.node(v).op {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Resize { .. } => "bilinear_resize",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::LocalAttention { .. } => "local_attention",
            Op::Bce { .. } => "bce",
        }
    }

    // ---------------------------------------------------------------------
    // forward ops
    // ---------------------------------------------------------------------

    /// `x: [Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2d) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(arg_err("conv2d", "stride and dilation must be >= 1"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d", self.shape(b), &ws[..1]));
            }
        }
        let (oh, pad_t) = same_pad(xs[1], ws[2], spec.stride, spec.dilation);
        let (ow, pad_l) = same_pad(xs[2], ws[3], spec.stride, spec.dilation);
        let geom = ConvGeom {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride: spec.stride,
            dil: spec.dilation,
            oh,
            ow,
            pad_t,
            pad_l,
        };
        let cols = im2col(self.value(x), &geom);
        let mut out = vec![T::zero(); geom.cout * geom.hw_out()];
        gemm(
            geom.cout,
            geom.k(),
            geom.hw_out(),
            self.value(w),
            false,
            &cols,
            false,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b);
            for (row, &bv) in out.chunks_mut(geom.hw_out()).zip(bias) {
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![geom.cout, oh, ow],
            out,
            Op::Conv2d { x, w, b, geom, cols },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Sigmoid(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(arg_err(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, n, inner) = lanes(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = T::neg_infinity();
                for k in 0..n {
                    max = max.max(xv[base + k * inner]);
                }
                let mut sum = T::zero();
                for k in 0..n {
                    let e = (xv[base + k * inner] - max).exp();
                    out[base + k * inner] = e;
                    sum = sum + e;
                }
                for k in 0..n {
                    out[base + k * inner] = out[base + k * inner] / sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(arg_err("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose2(self.value(x), r, c);
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || len == 0 || start + len > s[0] {
            return Err(arg_err(
                "narrow",
                format!("rows {start}..{} out of range for {s:?}", start + len),
            ));
        }
        let row: usize = s[1..].iter().product();
        let out = self.value(x)[start * row..(start + len) * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Narrow { x, start }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(arg_err("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(arg_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Bilinear resize of `[C, H, W]` with half-pixel centers (align-corners false).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(arg_err(
                "bilinear_resize",
                format!("cannot resize {s:?} to {out_h}x{out_w}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); c * out_h * out_w];
        if (h, w) == (out_h, out_w) {
            out.copy_from_slice(xv);
        } else {
            let ty = resize_taps(h, out_h);
            let tx = resize_taps(w, out_w);
            for ch in 0..c {
                let src = &xv[ch * h * w..(ch + 1) * h * w];
                let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                for (i, &(y0, y1, ly)) in ty.iter().enumerate() {
                    let ly = T::of(ly);
                    for (j, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let lx = T::of(lx);
                        let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                        let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                        dst[i * out_w + j] = top * (T::one() - ly) + bot * ly;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, out_h, out_w], out, Op::Resize { x }, rg))
    }

    /// Max pooling of `[C, H, W]`. Output size is `ceil(H / stride)`; windows
    /// running past the border are clipped.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || k == 0 || stride == 0 {
            return Err(arg_err(
                "maxpool2d",
                format!("invalid pooling k={k} stride={stride} on {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let xv = self.value(x);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = usize::MAX;
                    for r in i * stride..(i * stride + k).min(h) {
                        for q in j * stride..(j * stride + k).min(w) {
                            let idx = (ch * h + r) * w + q;
                            if best == usize::MAX || xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, oh, ow], out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Scale(x, factor), rg)
    }

    /// Windowed self-attention on `[C, H, W]`.
    ///
    /// Every position attends to the `wh x ww` window around itself with
    /// logits `<x_c, x_n> / sqrt(C)`; out-of-image taps are zero vectors.
    /// The output at each position is the softmax-weighted window average.
    pub fn local_attention(&mut self, x: Var, wh: usize, ww: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(arg_err("local_attention", format!("expected [C,H,W], got {s:?}")));
        }
        if wh.is_multiple_of(2) || ww.is_multiple_of(2) {
            return Err(arg_err(
                "local_attention",
                format!("window {wh}x{ww} must have odd sides"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let taps = wh * ww;
        let inv = T::one() / T::of(c as f64).sqrt();
        let xt = transpose2(self.value(x), c, hw);
        let mut weights = vec![T::zero(); hw * taps];
        let mut outt = vec![T::zero(); hw * c];
        let mut logits = vec![T::zero(); taps];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let xc = &xt[p * c..(p + 1) * c];
                for (t, l) in logits.iter_mut().enumerate() {
                    *l = match window_tap(i, j, t, wh, ww, h, w) {
                        Some(n) => dot(xc, &xt[n * c..(n + 1) * c]) * inv,
                        None => T::zero(),
                    };
                }
                let a = &mut weights[p * taps..(p + 1) * taps];
                softmax_into(&logits, a);
                let o = &mut outt[p * c..(p + 1) * c];
                for (t, &at) in a.iter().enumerate() {
                    if let Some(n) = window_tap(i, j, t, wh, ww, h, w) {
                        axpy(at, &xt[n * c..(n + 1) * c], o);
                    }
                }
            }
        }
        let out = transpose2(&outt, hw, c);
        let rg = self.rg(x);
        Ok(self.push(
            s,
            out,
            Op::LocalAttention {
                x,
                window: (wh, ww),
                weights,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`, with
    /// `p` clamped to `[eps, 1 - eps]`. Returns a scalar node.
    pub fn bce(&mut self, p: Var, target: &[T], eps: T) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != target.len() {
            return Err(shape_err("bce", self.shape(p), &[target.len()]));
        }
        let n = T::of(pv.len() as f64);
        let mut sum = T::zero();
        for (&pi, &gi) in pv.iter().zip(target) {
            let q = pi.max(eps).min(T::one() - eps);
            sum = sum + gi * q.ln() + (T::one() - gi) * (T::one() - q).ln();
        }
        let loss = -sum / n;
        let rg = self.rg(p);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                p,
                target: target.to_vec(),
                eps,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------------
    // backward
    // ---------------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate into
    /// any gradient already present; intermediate gradients are dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(arg_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_seeded(loss, vec![T::one()])
    }

    /// Vector-Jacobian product: backpropagates `seed` (same shape as `out`).
    pub fn backward_seeded(&mut self, out: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return Err(shape_err("backward", self.shape(out), &[seed.len()]));
        }
        if !self.rg(out) {
            return Ok(());
        }
        self.accumulate(out, seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (v, gv) in self.vjp(i, &g) {
                self.accumulate(v, gv);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (k, hw) = (geom.k(), geom.hw_out());
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); geom.cout * k];
                    gemm(geom.cout, hw, k, g, false, cols, true, T::zero(), &mut dw);
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let db = g.chunks(hw).map(|row| row.iter().copied().sum()).collect();
                    out.push((b, db));
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); k * hw];
                    gemm(k, geom.cout, hw, self.value(*w), true, g, false, T::zero(), &mut dcols);
                    out.push((*x, col2im(&dcols, geom)));
                }
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&gi, &y)| gi * y * (T::one() - y))
                    .collect();
                out.push((*x, dx));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = lanes(&node.shape, *axis);
                let y = &node.value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * n * inner + j;
                        let mut s = T::zero();
                        for k in 0..n {
                            s = s + y[base + k * inner] * g[base + k * inner];
                        }
                        for k in 0..n {
                            let idx = base + k * inner;
                            dx[idx] = y[idx] * (g[idx] - s);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, self.value(*b), true, T::zero(), &mut da);
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, self.value(*a), true, g, false, T::zero(), &mut db);
                    out.push((*b, db));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                out.push((*x, transpose2(g, r, c)));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Narrow { x, start } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                let off = start * g.len() / node.shape[0];
                dx[off..off + g.len()].copy_from_slice(g);
                out.push((*x, dx));
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[*axis + 1..].iter().product();
                let mut grads: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|&v| Vec::with_capacity(self.value(v).len()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, &v) in inputs.iter().enumerate() {
                        let chunk = self.shape(v)[*axis] * inner;
                        grads[k].extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                for (&v, gv) in inputs.iter().zip(grads) {
                    if self.rg(v) {
                        out.push((v, gv));
                    }
                }
            }
            Op::Resize { x } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (node.shape[1], node.shape[2]);
                let mut dx = vec![T::zero(); c * h * w];
                if (h, w) == (oh, ow) {
                    dx.copy_from_slice(g);
                } else {
                    let ty = resize_taps(h, oh);
                    let tx = resize_taps(w, ow);
                    for ch in 0..c {
                        let gs = &g[ch * oh * ow..(ch + 1) * oh * ow];
                        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
                        for (i, &(y0, y1, ly)) in ty.iter().enumerate() {
                            let ly = T::of(ly);
                            for (j, &(x0, x1, lx)) in tx.iter().enumerate() {
                                let lx = T::of(lx);
                                let gv = gs[i * ow + j];
                                let top = gv * (T::one() - ly);
                                let bot = gv * ly;
                                d[y0 * w + x0] = d[y0 * w + x0] + top * (T::one() - lx);
                                d[y0 * w + x1] = d[y0 * w + x1] + top * lx;
                                d[y1 * w + x0] = d[y1 * w + x0] + bot * (T::one() - lx);
                                d[y1 * w + x1] = d[y1 * w + x1] + bot * lx;
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] = dx[idx] + gv;
                }
                out.push((*x, dx));
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Scale(x, f) => out.push((*x, g.iter().map(|&v| v * *f).collect())),
            Op::LocalAttention { x, window, weights } => {
                out.push((*x, self.local_attention_vjp(*x, *window, weights, g)));
            }
            Op::Bce { p, target, eps } => {
                let pv = self.value(*p);
                let n = T::of(pv.len() as f64);
                let dp = pv
                    .iter()
                    .zip(target)
                    .map(|(&pi, &gi)| {
                        if pi < *eps || pi > T::one() - *eps {
                            T::zero()
                        } else {
                            -(gi / pi - (T::one() - gi) / (T::one() - pi)) / n * g[0]
                        }
                    })
                    .collect();
                out.push((*p, dp));
            }
        }
        out
    }

    fn local_attention_vjp(
        &self,
        x: Var,
        (wh, ww): (usize, usize),
        weights: &[T],
        g: &[T],
    ) -> Vec<T> {
        let s = self.shape(x);
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let taps = wh * ww;
        let inv = T::one() / T::of(c as f64).sqrt();
        let xt = transpose2(self.value(x), c, hw);
        let gt = transpose2(g, c, hw);
        let mut dxt = vec![T::zero(); hw * c];
        let mut da = vec![T::zero(); taps];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let a = &weights[p * taps..(p + 1) * taps];
                let gc = &gt[p * c..(p + 1) * c];
                let mut s = T::zero();
                for (t, d) in da.iter_mut().enumerate() {
                    *d = match window_tap(i, j, t, wh, ww, h, w) {
                        Some(n) => dot(gc, &xt[n * c..(n + 1) * c]),
                        None => T::zero(),
                    };
                    s = s + a[t] * *d;
                }
                for t in 0..taps {
                    let Some(n) = window_tap(i, j, t, wh, ww, h, w) else {
                        continue;
                    };
                    let dl = a[t] * (da[t] - s) * inv;
                    // value path and key path land on the neighbour
                    for ch in 0..c {
                        dxt[n * c + ch] = dxt[n * c + ch] + a[t] * gc[ch] + dl * xt[p * c + ch];
                    }
                    // query path lands on the centre
                    for ch in 0..c {
                        dxt[p * c + ch] = dxt[p * c + ch] + dl * xt[n * c + ch];
                    }
                }
            }
        }
        transpose2(&dxt, hw, c)
    }
}

/// Flat index of window tap `t` around `(i, j)`, or `None` outside the image.
#[inline]
fn window_tap(
    i: usize,
    j: usize,
    t: usize,
    wh: usize,
    ww: usize,
    h: usize,
    w: usize,
) -> Option<usize> {
    let r = i as isize + (t / ww) as isize - (wh / 2) as isize;
    let q = j as isize + (t % ww) as isize - (ww / 2) as isize;
    if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
        None
    } else {
        Some(r as usize * w + q as usize)
    }
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose2<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    y.iter_mut().zip(x).for_each(|(yi, &xi)| *yi = *yi + alpha * xi);
}

fn softmax_into<T: Real>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum = sum + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / sum);
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.hw_out();
    let mut cols = vec![T::zero(); g.k() * hw];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..g.oh {
                    for oj in 0..g.ow {
                        if let Some((r, c)) = g.src(oi, oj, ki, kj) {
                            dst[oi * g.ow + oj] = plane[r * g.w + c];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.hw_out();
    let mut dx = vec![T::zero(); g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..g.oh {
                    for oj in 0..g.ow {
                        if let Some((r, c)) = g.src(oi, oj, ki, kj) {
                            plane[r * g.w + c] = plane[r * g.w + c] + src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[0.0; 3]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_same_padding_counts_overlap() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3, 3], &[1.0; 9]));
        let w = g.input(t(&[1, 1, 3, 3], &[1.0; 9]));
        let y = g.conv2d(x, w, None, Conv2d::default()).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        assert_eq!(g.value(y), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_output_size_is_ceil_division() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![2, 5, 7]));
        let w = g.input(Tensor::zeros(vec![3, 2, 3, 3]));
        let y = g
            .conv2d(x, w, None, Conv2d { stride: 2, dilation: 1 })
            .unwrap();
        assert_eq!(g.shape(y), &[3, 3, 4]);
        let y = g
            .conv2d(x, w, None, Conv2d { stride: 1, dilation: 2 })
            .unwrap();
        assert_eq!(g.shape(y), &[3, 5, 7]);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..18).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = g.input(t(&[2, 3, 3], &data));
        let w = g.input(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.conv2d(x, w, None, Conv2d::default()).unwrap();
        assert_eq!(g.value(y), &data[..]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = g.input(Tensor::zeros(vec![3]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(0.0f64));
        let y = g.sigmoid(w);
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.25]);
    }

    #[test]
    fn relu_subgradient_is_zero_at_origin() {
        let mut g = Graph::new();
        let w = g.param(t(&[3], &[-1.0, 2.0, 0.0]));
        let y = g.relu(w);
        g.backward_seeded(y, vec![1.0; 3]).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.relu(w);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn intermediate_grads_are_freed() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.scale(w, 3.0);
        let z = g.bce(y, &[0.0, 0.0], 1e-7).unwrap();
        g.backward(z).unwrap();
        assert!(g.grad(y).is_none());
        assert!(g.grad(w).is_some());
    }

    #[test]
    fn maxpool_clips_border_windows() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let x = g.input(t(&[1, 5, 5], &data));
        let y = g.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        assert_eq!(
            g.value(y),
            &[6.0, 8.0, 9.0, 16.0, 18.0, 19.0, 21.0, 23.0, 24.0]
        );
    }

    #[test]
    fn bilinear_half_pixel_upsample() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 2], &[0.0, 1.0]));
        let y = g.bilinear_resize(x, 1, 4).unwrap();
        // src = (d + 0.5) / 2 - 0.5 -> [-0.25, 0.25, 0.75, 1.25], clamped
        assert_eq!(g.value(y), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn local_attention_unit_window_is_passthrough() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let x = g.input(t(&[3, 2, 2], &data));
        let y = g.local_attention(x, 1, 1).unwrap();
        assert_eq!(g.value(y), &data[..]);
        assert!(g.local_attention(x, 2, 3).is_err());
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.input(t(&[4], &[0.5; 4]));
        let l = g.bce(p, &[1.0; 4], 1e-7).unwrap();
        assert!((g.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
