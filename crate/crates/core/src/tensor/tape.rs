use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Records primitive operations so their adjoints can be replayed.
///
/// A tape is single-threaded and append-only; build a fresh one per
/// forward/backward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

enum Op<T: Real> {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: T },
    MatMul { a: usize, b: usize, dims: MatMulDims },
    Gather { a: usize, index: Rc<[usize]> },
    Reshape { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize },
    AvgPool { a: usize, n: usize, h: usize, w: usize, c: usize, kh: usize, kw: usize },
    Bilinear { a: usize, n: usize, src: (usize, usize), c: usize, taps_y: Rc<[Tap]>, taps_x: Rc<[Tap]> },
    MeanAxis { a: usize, outer: usize, len: usize, inner: usize },
    Sum { a: usize },
    CrossEntropy { logits: usize, labels: Rc<[usize]>, probs: Vec<T> },
}

/// One output coordinate of a 1-D interpolation: `lo + frac·(hi − lo)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel taps for upsampling an axis of `extent` by `ratio`, with
/// sampling confined to consecutive windows of `window` source cells.
pub fn window_taps(extent: usize, window: usize, ratio: usize) -> Vec<Tap> {
    let target_window = window * ratio;
    (0..extent * ratio)
        .map(|u| {
            let (win, local) = (u / target_window, u % target_window);
            let pos = ((local as f64 + 0.5) / ratio as f64 - 0.5).clamp(0.0, (window - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(window - 1);
            Tap { lo: win * window + lo, hi: win * window + hi, frac: pos - lo as f64 }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    a_stride: usize,
    b_stride: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatMulDims, Vec<usize>)> {
    let err = || Error::Dimension { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (ra, rb) = (a.len(), b.len());
    let (m, k) = (a[ra - 2], a[ra - 1]);
    let (k2, n) = (b[rb - 2], b[rb - 1]);
    if k != k2 {
        return Err(err());
    }
    let (ba, bb) = (&a[..ra - 2], &b[..rb - 2]);
    let dims;
    let mut out_shape;
    if bb.is_empty() {
        // weight matrix shared by every leading index of `a`: one flat product
        let rows = numel(ba) * m;
        dims = MatMulDims { batch: 1, a_stride: 0, b_stride: 0, m: rows, k, n };
        out_shape = ba.to_vec();
    } else if ba.is_empty() {
        dims = MatMulDims { batch: numel(bb), a_stride: 0, b_stride: k * n, m, k, n };
        out_shape = bb.to_vec();
    } else if ba == bb {
        dims = MatMulDims { batch: numel(ba), a_stride: m * k, b_stride: k * n, m, k, n };
        out_shape = ba.to_vec();
    } else {
        return Err(err());
    }
    out_shape.push(m);
    out_shape.push(n);
    Ok((dims, out_shape))
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that participates in differentiation.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(self, other: Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Usage("operands recorded on different tapes".into()))
        }
    }

    fn emit(self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'t, T> {
        let rg = inputs.iter().any(|&i| self.tape.requires_grad(i));
        self.tape.push(value, op, rg)
    }

    /// Elementwise sum; `other` may match a trailing suffix of `self`'s
    /// shape, in which case it is broadcast over the leading axes.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if !is_suffix(a.shape(), b.shape()) {
            return Err(Error::Dimension { op: "add", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let nb = b.len();
        let data = a.data().iter().enumerate().map(|(i, &v)| v + b.data()[i % nb]).collect();
        let out = Tensor { shape: a.shape().to_vec(), data };
        Ok(self.emit(out, Op::Add { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    /// Elementwise product with the same suffix broadcasting as [`Var::add`].
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if !is_suffix(a.shape(), b.shape()) {
            return Err(Error::Dimension { op: "mul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let nb = b.len();
        let data = a.data().iter().enumerate().map(|(i, &v)| v * b.data()[i % nb]).collect();
        let out = Tensor { shape: a.shape().to_vec(), data };
        Ok(self.emit(out, Op::Mul { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * s);
        self.emit(out, Op::Scale { a: self.id, s }, &[self.id])
    }

    /// `[..., m, k] × [..., k, n]`. Batch axes must match, or one operand
    /// must be a plain matrix shared across the other's batch.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (d, shape) = matmul_dims(a.shape(), b.shape())?;
        let mut data = vec![T::zero(); numel(&shape)];
        for bi in 0..d.batch {
            let asl = &a.data()[bi * d.a_stride..bi * d.a_stride + d.m * d.k];
            let bsl = &b.data()[bi * d.b_stride..bi * d.b_stride + d.k * d.n];
            let osl = &mut data[bi * d.m * d.n..(bi + 1) * d.m * d.n];
            kernels::gemm_acc(asl, bsl, osl, d.m, d.k, d.n);
        }
        let out = Tensor { shape, data };
        Ok(self.emit(out, Op::MatMul { a: self.id, b: other.id, dims: d }, &[self.id, other.id]))
    }

    /// `out[i] = self[index[i]]`, reshaped to `shape`. Backward scatter-adds,
    /// so repeated indices are allowed.
    pub fn gather(self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        if index.len() != numel(shape) {
            return Err(Error::Shape(format!("gather index of {} for shape {shape:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= a.len()) {
            return Err(Error::Shape(format!("gather index {bad} outside {:?}", a.shape())));
        }
        let data = index.iter().map(|&i| a.data()[i]).collect();
        let out = Tensor { shape: shape.to_vec(), data };
        Ok(self.emit(out, Op::Gather { a: self.id, index }, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        if numel(shape) != a.len() {
            return Err(Error::Dimension { op: "reshape", lhs: a.shape().to_vec(), rhs: shape.to_vec() });
        }
        let out = Tensor { shape: shape.to_vec(), data: a.data().to_vec() };
        Ok(self.emit(out, Op::Reshape { a: self.id }, &[self.id]))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("transpose of rank-{} tensor", shape.len())));
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch = numel(&shape[..r - 2]);
        let mut index = Vec::with_capacity(numel(&shape));
        for b in 0..batch {
            for c in 0..cols {
                for rr in 0..rows {
                    index.push(b * rows * cols + rr * cols + c);
                }
            }
        }
        let mut out_shape = shape[..r - 2].to_vec();
        out_shape.extend([cols, rows]);
        self.gather(index.into(), &out_shape)
    }

    /// Normalizes over the last axis, then applies the `gamma`/`beta` affine.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let x = self.value();
        let (g, b) = (gamma.value(), beta.value());
        let width = *x.shape().last().ok_or_else(|| Error::Shape("layer_norm of a scalar".into()))?;
        if g.shape() != [width] || b.shape() != [width] {
            return Err(Error::Dimension { op: "layer_norm", lhs: x.shape().to_vec(), rhs: g.shape().to_vec() });
        }
        if eps <= T::zero() {
            return Err(Error::Usage("layer_norm eps must be positive".into()));
        }
        let (y, xhat, rstd) = kernels::layer_norm(x.data(), g.data(), b.data(), width, eps);
        let out = Tensor { shape: x.shape().to_vec(), data: y };
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd };
        Ok(self.emit(out, op, &[self.id, gamma.id, beta.id]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(self) -> Var<'t, T> {
        let out = self.value().map(kernels::gelu);
        self.emit(out, Op::Gelu { a: self.id }, &[self.id])
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let out = self.value().map(kernels::sigmoid);
        self.emit(out, Op::Sigmoid { a: self.id }, &[self.id])
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let width = *a.shape().last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let out = Tensor { shape: a.shape().to_vec(), data: kernels::softmax_rows(a.data(), width) };
        Ok(self.emit(out, Op::Softmax { a: self.id }, &[self.id]))
    }

    /// Block-mean pooling of an `[N, H, W, C]` map to `[N, out_h, out_w, C]`.
    /// Extents must divide exactly.
    pub fn adaptive_avg_pool(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let &[n, h, w, c] = a.shape() else {
            return Err(Error::Shape(format!("adaptive_avg_pool expects [N,H,W,C], got {:?}", a.shape())));
        };
        if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
            return Err(Error::Config(format!(
                "cannot pool {h}x{w} to {out_h}x{out_w}: extents must divide evenly"
            )));
        }
        let (kh, kw) = (h / out_h, w / out_w);
        let inv = T::one() / T::lit((kh * kw) as f64);
        let mut data = vec![T::zero(); n * out_h * out_w * c];
        let src = a.data();
        for b in 0..n {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let o = ((b * out_h + oy) * out_w + ox) * c;
                    let orow = &mut data[o..o + c];
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let i = ((b * h + oy * kh + dy) * w + ox * kw + dx) * c;
                            for (acc, &v) in orow.iter_mut().zip(&src[i..i + c]) {
                                *acc += v;
                            }
                        }
                    }
                    for acc in orow.iter_mut() {
                        *acc *= inv;
                    }
                }
            }
        }
        let out = Tensor { shape: vec![n, out_h, out_w, c], data };
        Ok(self.emit(out, Op::AvgPool { a: self.id, n, h, w, c, kh, kw }, &[self.id]))
    }

    /// Bilinear upsampling by integer `ratio`, applied independently inside
    /// each `window` of the `[N, H, W, C]` source: a target window reads only
    /// its own source window. Half-pixel sample centres, clamped to the
    /// window edge. Evaluated as nested lerps, so constant windows stay
    /// exactly constant.
    pub fn window_bilinear(self, window: (usize, usize), ratio: (usize, usize)) -> Result<Var<'t, T>> {
        let a = self.value();
        let &[n, h, w, c] = a.shape() else {
            return Err(Error::Shape(format!("window_bilinear expects [N,H,W,C], got {:?}", a.shape())));
        };
        if window.0 == 0 || window.1 == 0 || h % window.0 != 0 || w % window.1 != 0 {
            return Err(Error::Config(format!(
                "interpolation window {}x{} does not tile a {h}x{w} map",
                window.0, window.1
            )));
        }
        if ratio.0 == 0 || ratio.1 == 0 {
            return Err(Error::Config("upsampling ratio must be positive".into()));
        }
        let taps_y: Rc<[Tap]> = window_taps(h, window.0, ratio.0).into();
        let taps_x: Rc<[Tap]> = window_taps(w, window.1, ratio.1).into();
        let (oh, ow) = (taps_y.len(), taps_x.len());
        let src = a.data();
        let mut data = vec![T::zero(); n * oh * ow * c];
        for b in 0..n {
            for (oy, ty) in taps_y.iter().enumerate() {
                let fy = T::lit(ty.frac);
                for (ox, tx) in taps_x.iter().enumerate() {
                    let fx = T::lit(tx.frac);
                    let at = |y: usize, x: usize| ((b * h + y) * w + x) * c;
                    let (p00, p01) = (at(ty.lo, tx.lo), at(ty.lo, tx.hi));
                    let (p10, p11) = (at(ty.hi, tx.lo), at(ty.hi, tx.hi));
                    let o = ((b * oh + oy) * ow + ox) * c;
                    for ch in 0..c {
                        let top = src[p00 + ch] + fx * (src[p01 + ch] - src[p00 + ch]);
                        let bot = src[p10 + ch] + fx * (src[p11 + ch] - src[p10 + ch]);
                        data[o + ch] = top + fy * (bot - top);
                    }
                }
            }
        }
        let out = Tensor { shape: vec![n, oh, ow, c], data };
        let op = Op::Bilinear { a: self.id, n, src: (h, w), c, taps_y, taps_x };
        Ok(self.emit(out, op, &[self.id]))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let inv = T::one() / T::lit(len as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let orow = &mut data[o * inner..(o + 1) * inner];
            for l in 0..len {
                let i = (o * len + l) * inner;
                for (acc, &v) in orow.iter_mut().zip(&a.data()[i..i + inner]) {
                    *acc += v;
                }
            }
            for acc in orow.iter_mut() {
                *acc *= inv;
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor { shape: out_shape, data };
        Ok(self.emit(out, Op::MeanAxis { a: self.id, outer, len, inner }, &[self.id]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t, T> {
        let a = self.value();
        let mut acc = T::zero();
        for &v in a.data() {
            acc += v;
        }
        self.emit(Tensor::scalar(acc), Op::Sum { a: self.id }, &[self.id])
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let &[n, k] = a.shape() else {
            return Err(Error::Shape(format!("cross_entropy expects [N,K], got {:?}", a.shape())));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::Usage(format!("{} labels in [0,{k}) required", n)));
        }
        let probs = kernels::softmax_rows(a.data(), k);
        let mut loss = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            let row = &a.data()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for &v in row {
                s += (v - max).exp();
            }
            loss += s.ln() + max - row[l];
        }
        loss /= T::lit(n as f64);
        let op = Op::CrossEntropy { logits: self.id, labels: labels.into(), probs };
        Ok(self.emit(Tensor::scalar(loss), op, &[self.id]))
    }

    /// Reverse pass from this scalar. Gradients accumulate additively over
    /// every use of a value.
    pub fn backward(self) -> Result<Gradients<T>> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![T::one()]);
        let mut out: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            let Some(g) = grads[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            propagate(&nodes, &mut grads, id, &g);
            out[id] = Some(Tensor { shape: node.value.shape().to_vec(), data: g });
        }
        Ok(Gradients { grads: out })
    }
}

fn slot<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], id: usize) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]))
}

fn propagate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: &[T]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (x, &d) in ga.iter_mut().zip(g) {
                    *x += d;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let nb = gb.len();
                for (i, &d) in g.iter().enumerate() {
                    gb[i % nb] += d;
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let nb = bv.len();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i] * bv.data()[i % nb];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (i, &d) in g.iter().enumerate() {
                    gb[i % nb] += d * av.data()[i];
                }
            }
        }
        Op::Scale { a, s } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (x, &d) in ga.iter_mut().zip(g) {
                    *x += d * *s;
                }
            }
        }
        Op::MatMul { a, b, dims: d } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = slot(nodes, grads, *a) {
                for bi in 0..d.batch {
                    let gy = &g[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                    let bsl = &bv.data()[bi * d.b_stride..bi * d.b_stride + d.k * d.n];
                    let gsl = &mut ga[bi * d.a_stride..bi * d.a_stride + d.m * d.k];
                    kernels::gemm_acc_bt(gy, bsl, gsl, d.m, d.k, d.n);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for bi in 0..d.batch {
                    let gy = &g[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                    let asl = &av.data()[bi * d.a_stride..bi * d.a_stride + d.m * d.k];
                    let gsl = &mut gb[bi * d.b_stride..bi * d.b_stride + d.k * d.n];
                    kernels::gemm_acc_at(asl, gy, gsl, d.m, d.k, d.n);
                }
            }
        }
        Op::Gather { a, index } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (&i, &d) in index.iter().zip(g) {
                    ga[i] += d;
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (x, &d) in ga.iter_mut().zip(g) {
                    *x += d;
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let gam = &nodes[*gamma].value;
            let width = gam.len();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (i, &d) in g.iter().enumerate() {
                    gg[i % width] += d * xhat[i];
                }
            }
            if let Some(gbeta) = slot(nodes, grads, *beta) {
                for (i, &d) in g.iter().enumerate() {
                    gbeta[i % width] += d;
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let inv_w = T::one() / T::lit(width as f64);
                let mut dxhat = vec![T::zero(); width];
                for (r, &rs) in rstd.iter().enumerate() {
                    let base = r * width;
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..width {
                        let dh = g[base + c] * gam.data()[c];
                        dxhat[c] = dh;
                        m1 += dh;
                        m2 += dh * xhat[base + c];
                    }
                    m1 *= inv_w;
                    m2 *= inv_w;
                    for c in 0..width {
                        gx[base + c] += rs * (dxhat[c] - m1 - xhat[base + c] * m2);
                    }
                }
            }
        }
        Op::Gelu { a } => {
            let av = &nodes[*a].value;
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, &d), &v) in ga.iter_mut().zip(g).zip(av.data()) {
                    *x += d * kernels::gelu_grad(v);
                }
            }
        }
        Op::Sigmoid { a } => {
            let y = &node.value;
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, &d), &s) in ga.iter_mut().zip(g).zip(y.data()) {
                    *x += d * s * (T::one() - s);
                }
            }
        }
        Op::Softmax { a } => {
            let y = &node.value;
            let width = *y.shape().last().unwrap_or(&1);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((gx, gy), yy) in ga.chunks_mut(width).zip(g.chunks(width)).zip(y.data().chunks(width)) {
                    let mut dot = T::zero();
                    for (&d, &s) in gy.iter().zip(yy) {
                        dot += d * s;
                    }
                    for ((x, &d), &s) in gx.iter_mut().zip(gy).zip(yy) {
                        *x += s * (d - dot);
                    }
                }
            }
        }
        Op::AvgPool { a, n, h, w, c, kh, kw } => {
            let (n, h, w, c, kh, kw) = (*n, *h, *w, *c, *kh, *kw);
            let (oh, ow) = (h / kh, w / kw);
            let inv = T::one() / T::lit((kh * kw) as f64);
            if let Some(ga) = slot(nodes, grads, *a) {
                for b in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            let o = ((b * oh + y / kh) * ow + x / kw) * c;
                            let i = ((b * h + y) * w + x) * c;
                            for ch in 0..c {
                                ga[i + ch] += g[o + ch] * inv;
                            }
                        }
                    }
                }
            }
        }
        Op::Bilinear { a, n, src: (h, w), c, taps_y, taps_x } => {
            let (n, h, w, c) = (*n, *h, *w, *c);
            let (oh, ow) = (taps_y.len(), taps_x.len());
            if let Some(ga) = slot(nodes, grads, *a) {
                for b in 0..n {
                    for (oy, ty) in taps_y.iter().enumerate() {
                        for (ox, tx) in taps_x.iter().enumerate() {
                            let wy = [T::one() - T::lit(ty.frac), T::lit(ty.frac)];
                            let wx = [T::one() - T::lit(tx.frac), T::lit(tx.frac)];
                            let o = ((b * oh + oy) * ow + ox) * c;
                            for (yi, &y) in [ty.lo, ty.hi].iter().enumerate() {
                                for (xi, &x) in [tx.lo, tx.hi].iter().enumerate() {
                                    let wt = wy[yi] * wx[xi];
                                    let i = ((b * h + y) * w + x) * c;
                                    for ch in 0..c {
                                        ga[i + ch] += wt * g[o + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::MeanAxis { a, outer, len, inner } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            let inv = T::one() / T::lit(len as f64);
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for l in 0..len {
                        let i = (o * len + l) * inner;
                        for (x, &d) in ga[i..i + inner].iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *x += d * inv;
                        }
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = g[0] / T::lit(n as f64);
            if let Some(ga) = slot(nodes, grads, *logits) {
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == l { T::one() } else { T::zero() };
                        ga[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }
        }
    }
}

/// Gradients from one reverse pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the value does not require grad or is unreachable from the loss.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`], but zeros for unreachable values.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}
