//! Reverse-mode autodiff over a linear tape.
//!
//! Every primitive appends one node holding its output value and enough of
//! its inputs to run the vector-Jacobian product later. `backward` walks the
//! tape once from the loss towards the leaves.

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    axis_split, c, gelu_grad_scalar, gelu_scalar, mm_nn, mm_nt, mm_tn, Scalar, Tensor,
};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    SumAll(Var),
    MeanAxis { x: Var, axis: usize },
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Reshape(Var),
    Gather { x: Var, src: Rc<Vec<usize>> },
    Interp { x: Var, taps: Rc<Vec<[(usize, T); 4]>>, width: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    DwConv { x: Var, k: Var, b: Option<Var> },
    CrossEntropy { logits: Var, targets: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of executed primitives. Confined to one thread.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
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

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("shape checked by caller")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |p, q| p + q);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |p, q| p - q);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |p, q| p * q);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let period = self.value(b).numel();
        let bv = self.value(b).data();
        let av = self.value(a);
        let data = av.data().iter().enumerate().map(|(i, &x)| x + bv[i % period]).collect();
        let out = Tensor::new(av.shape(), data)?;
        self.push("add_broadcast", out, Op::AddBcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / c(n as f64))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("mean", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let inv = T::one() / c(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xv[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let out = Tensor::new(&new_shape, out)?;
        self.push("mean", out, Op::MeanAxis { x, axis }, &[x])
    }

    // ── products ─────────────────────────────────────────────────────

    /// Batched matrix product `[..., M, K] × [..., K, N]`. A rank-2 right
    /// operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || shape_err("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 || (sb.len() > 2 && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(bad());
        }
        let batch = sa[..sa.len() - 2].iter().product::<usize>();
        let shared = sb.len() == 2;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let boff = if shared { 0 } else { bi * k * n };
            mm_nn(
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[boff..boff + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(&shape, out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `y[..., j] = Σ_i x[..., i] w[i, j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(shape_err("linear", format!("input {sx:?} against weight {sw:?}")));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear", format!("bias {:?} against weight {sw:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv);
            }
        }
        mm_nn(self.value(x).data(), self.value(w).data(), &mut out, rows, din, dout);
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(&shape, out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", out, Op::Linear { x, w, b }, &parents)
    }

    // ── layout ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Output element `j` copies input element `src[j]`.
    fn gather(&mut self, name: &'static str, x: Var, shape: &[usize], src: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).data();
        let out = Tensor::new(shape, src.iter().map(|&s| xv[s]).collect())?;
        self.push(name, out, Op::Gather { x, src: Rc::new(src) }, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let mut strides = vec![1usize; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        let n: usize = shape.iter().product();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            src.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        self.gather("permute", x, &out_shape, src)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err("transpose", format!("rank {r} < 2")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    /// `[B, H, W, C]` → `[B, (H/p)(W/p), p·p·C]`: each non-overlapping p×p
    /// block becomes one vector ordered (row-in-block, col-in-block, channel).
    pub fn space_to_depth(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || p == 0 || s[1] % p != 0 || s[2] % p != 0 {
            return Err(shape_err("space_to_depth", format!("shape {s:?} with block {p}")));
        }
        let (b, h, w, ch) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / p, w / p);
        let mut src = Vec::with_capacity(b * h * w * ch);
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for py in 0..p {
                        for px in 0..p {
                            let row = ((bi * h + oy * p + py) * w + ox * p + px) * ch;
                            src.extend(row..row + ch);
                        }
                    }
                }
            }
        }
        self.gather("space_to_depth", x, &[b, oh * ow, p * p * ch], src)
    }

    /// Bilinear resampling of a `[h0·w0, D]` grid to `[h·w, D]` using
    /// half-pixel centers and edge clamping.
    pub fn resize_bilinear(&mut self, x: Var, from: (usize, usize), to: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != from.0 * from.1 || to.0 == 0 || to.1 == 0 {
            return Err(shape_err("resize_bilinear", format!("grid {s:?} declared as {from:?}")));
        }
        let width = s[1];
        let axis_taps = |src: usize, dst: usize, o: usize| -> [(usize, f64); 2] {
            let pos = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let t = pos - lo as f64;
            [(lo, 1.0 - t), (hi, t)]
        };
        let mut taps = Vec::with_capacity(to.0 * to.1);
        for oy in 0..to.0 {
            let ty = axis_taps(from.0, to.0, oy);
            for ox in 0..to.1 {
                let tx = axis_taps(from.1, to.1, ox);
                let mut t = [(0usize, T::zero()); 4];
                for (k, ((yy, wy), (xx, wx))) in
                    ty.iter().flat_map(|a| tx.iter().map(move |b| (*a, *b))).enumerate()
                {
                    t[k] = (yy * from.1 + xx, c(wy * wx));
                }
                taps.push(t);
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); taps.len() * width];
        for (j, t) in taps.iter().enumerate() {
            for &(row, wgt) in t {
                for d in 0..width {
                    out[j * width + d] = out[j * width + d] + wgt * xv[row * width + d];
                }
            }
        }
        let out = Tensor::new(&[to.0 * to.1, width], out)?;
        self.push("resize_bilinear", out, Op::Interp { x, taps: Rc::new(taps), width }, &[x])
    }

    // ── nonlinearities and normalization ─────────────────────────────

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| xv[at(l)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for l in 0..len {
                    let e = (xv[at(l)] - mx).exp();
                    out[at(l)] = e;
                    z = z + e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / z;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// Layer normalization over the last axis, population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("input {shape:?} with gamma {:?} beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let rows = self.value(x).numel() / d;
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let inv_d = T::one() / c(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let rs = T::one() / (var + c(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(&shape, out)?;
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// 3×3 depthwise convolution, stride 1, zero padding 1, over `[..., C, H, W]`.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(shape_err("depthwise_conv2d", format!("input {s:?} needs [.., C, H, W]")));
        }
        let (ch, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
        if self.shape(k) != [ch, 3, 3] {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("kernel {:?} for {ch} channels", self.shape(k)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ch] {
                return Err(shape_err("depthwise_conv2d", format!("bias {:?} for {ch} channels", self.shape(b))));
            }
        }
        let planes = self.value(x).numel() / (h * w);
        let (xv, kv) = (self.value(x).data(), self.value(k).data());
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); xv.len()];
        for pl in 0..planes {
            let cc = pl % ch;
            let kern = &kv[cc * 9..cc * 9 + 9];
            let bias = bv.map_or(T::zero(), |bv| bv[cc]);
            let src = &xv[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out[pl * h * w..(pl + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias;
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = xx as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = acc + kern[ky * 3 + kx] * src[iy as usize * w + ix as usize];
                        }
                    }
                    dst[y * w + xx] = acc;
                }
            }
        }
        let out = Tensor::new(&s, out)?;
        let parents: Vec<Var> = [Some(x), Some(k), b].into_iter().flatten().collect();
        self.push("depthwise_conv2d", out, Op::DwConv { x, k, b }, &parents)
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class indices,
    /// optionally with label smoothing.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy", format!("logits {s:?} with {} labels", labels.len())));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err("cross_entropy", format!("label {bad} with {k} classes")));
        }
        let lv = self.value(logits).data();
        let off = c::<T>(smoothing / k as f64);
        let on = c::<T>(1.0 - smoothing) + off;
        let mut targets = vec![off; b * k];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            targets[r * k + label] = on;
            let row = &lv[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - mx).exp()).ln() + mx;
            for j in 0..k {
                total = total - targets[r * k + j] * (row[j] - lse);
            }
        }
        let out = Tensor::scalar(total / c(b as f64));
        self.push("cross_entropy", out, Op::CrossEntropy { logits, targets }, &[logits])
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Populates gradients of the scalar `loss` for every node that requires
    /// one. Valid once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(slot.data_mut());
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let add_into = |dst: &mut [T], src: &[T]| {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(d, &s)| *d = *d - s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + gd[j] * bv[j];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + gd[j] * av[j];
                    }
                });
            }
            Op::AddBcast(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| {
                    let p = d.len();
                    for (j, &s) in gd.iter().enumerate() {
                        d[j % p] = d[j % p] + s;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, &v)| *d = *d + v * *s));
            }
            Op::SumAll(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d = *d + s));
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let inv = T::one() / c(len as f64);
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            for k in 0..inner {
                                let j = (o * len + l) * inner + k;
                                d[j] = d[j] + gd[o * inner + k] * inv;
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = self.value(*a).numel() / (m * k);
                let shared = sb.len() == 2;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for bi in 0..batch {
                        let boff = if shared { 0 } else { bi * k * n };
                        mm_nt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &bv[boff..boff + k * n],
                            &mut d[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for bi in 0..batch {
                        let boff = if shared { 0 } else { bi * k * n };
                        mm_tn(
                            &av[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut d[boff..boff + k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (din, dout) = (sw[0], sw[1]);
                let rows = gd.len() / dout;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate(grads, *x, |d| mm_nt(gd, wv, d, rows, dout, din));
                self.accumulate(grads, *w, |d| mm_tn(xv, gd, d, din, rows, dout));
                if let Some(b) = b {
                    self.accumulate(grads, *b, |d| {
                        for r in 0..rows {
                            add_into(d, &gd[r * dout..(r + 1) * dout]);
                        }
                    });
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |d| add_into(d, gd)),
            Op::Gather { x, src } => {
                self.accumulate(grads, *x, |d| {
                    for (j, &s) in src.iter().enumerate() {
                        d[s] = d[s] + gd[j];
                    }
                });
            }
            Op::Interp { x, taps, width } => {
                self.accumulate(grads, *x, |d| {
                    for (j, t) in taps.iter().enumerate() {
                        for &(row, wgt) in t {
                            for k in 0..*width {
                                d[row * width + k] = d[row * width + k] + wgt * gd[j * width + k];
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let y = self.nodes[i].value.data();
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + k;
                            let dot = (0..len).fold(T::zero(), |a, l| a + gd[at(l)] * y[at(l)]);
                            for l in 0..len {
                                d[at(l)] = d[at(l)] + y[at(l)] * (gd[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let dim = self.shape(*gamma)[0];
                let rows = rstd.len();
                let gv = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |d| {
                    for r in 0..rows {
                        for j in 0..dim {
                            d[j] = d[j] + gd[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |d| {
                    for r in 0..rows {
                        add_into(d, &gd[r * dim..(r + 1) * dim]);
                    }
                });
                let inv_d = T::one() / c(dim as f64);
                self.accumulate(grads, *x, |d| {
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..dim {
                            let dh = gd[r * dim + j] * gv[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * xhat[r * dim + j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..dim {
                            let dh = gd[r * dim + j] * gv[j];
                            let idx = r * dim + j;
                            d[idx] = d[idx] + rstd[r] * (dh - m1 - xhat[idx] * m2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + gd[j] * gelu_grad_scalar(xv[j]);
                    }
                });
            }
            Op::DwConv { x, k, b } => {
                let s = self.shape(*x);
                let (ch, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
                let planes = self.value(*x).numel() / (h * w);
                let (xv, kv) = (self.value(*x).data(), self.value(*k).data());
                let taps = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for pl in 0..planes {
                        for y in 0..h {
                            for xx in 0..w {
                                for ky in 0..3 {
                                    let iy = y as isize + ky as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ix = xx as isize + kx as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        // (plane, output offset, input offset, kernel offset)
                                        f(
                                            pl,
                                            pl * h * w + y * w + xx,
                                            pl * h * w + iy as usize * w + ix as usize,
                                            (pl % ch) * 9 + ky * 3 + kx,
                                        );
                                    }
                                }
                            }
                        }
                    }
                };
                self.accumulate(grads, *x, |d| taps(&mut |_, o, src, kk| d[src] = d[src] + kv[kk] * gd[o]));
                self.accumulate(grads, *k, |d| taps(&mut |_, o, src, kk| d[kk] = d[kk] + xv[src] * gd[o]));
                if let Some(b) = b {
                    self.accumulate(grads, *b, |d| {
                        for pl in 0..planes {
                            let s = gd[pl * h * w..(pl + 1) * h * w].iter().fold(T::zero(), |a, &v| a + v);
                            d[pl % ch] = d[pl % ch] + s;
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let s = self.shape(*logits);
                let (b, k) = (s[0], s[1]);
                let lv = self.value(*logits).data();
                let scale = gd[0] / c(b as f64);
                self.accumulate(grads, *logits, |d| {
                    for r in 0..b {
                        let row = &lv[r * k..(r + 1) * k];
                        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let z = row.iter().fold(T::zero(), |a, &v| a + (v - mx).exp());
                        for j in 0..k {
                            let p = (row[j] - mx).exp() / z;
                            d[r * k + j] = d[r * k + j] + (p - targets[r * k + j]) * scale;
                        }
                    }
                });
            }
        }
    }
}
