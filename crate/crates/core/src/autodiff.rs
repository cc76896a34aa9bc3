//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive op in execution order; [`Var`] is a
//! handle into it. Because nodes can only reference earlier nodes the tape is
//! topologically sorted by construction, and [`Tape::backward`] is a single
//! reverse sweep with sequential accumulation.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization direction for [`Tape::softmax`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Each row sums to one.
    Row,
    /// Each column sums to one.
    Col,
}

/// Deliberate backward-rule corruption, used to prove the gradient checker
/// notices broken ops.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SoftmaxBackwardSign,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var, Axis),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        col: Option<Vec<F>>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        target: Vec<F>,
        eps: F,
    },
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
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

impl<F> Node<F> {
    fn saved_elems(&self) -> usize {
        match &self.op {
            Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
            Op::Conv2d { col, .. } => col.as_ref().map_or(0, Vec::len),
            Op::MaxPool2 { argmax, .. } => argmax.len(),
            _ => 0,
        }
    }
}

/// Recorded computation; one per forward pass.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    fault: Option<Fault>,
}

/// Gradients produced by [`Tape::backward`], retained for leaves and the loss.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn bilinear_taps(src_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    // align_corners = false: src = (dst + 0.5) / factor - 0.5, clamped at 0
    (0..src_len * factor)
        .map(|d| {
            let s = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src_len - 1);
            let i1 = if i0 + 1 < src_len { i0 + 1 } else { i0 };
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn check_finite<F: Element>(op: &str, t: &Tensor<F>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op}: non-finite input")))
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest single buffer (values plus saved intermediates) recorded at or
    /// after node index `mark`.
    pub fn max_buffer_since(&self, mark: usize) -> usize {
        self.nodes[mark..]
            .iter()
            .map(|n| n.value.numel().max(n.saved_elems()))
            .max()
            .unwrap_or(0)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x + bias` broadcast along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x);
        let bs = self.value(bias);
        let c = *xs.shape().last().expect("non-empty shape");
        if bs.numel() != c {
            return Err(Error::shape("add_bias", xs.shape(), bs.shape()));
        }
        let b = bs.data();
        let data = xs
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let out = Tensor::new(xs.shape(), data)?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| F::one() / (F::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Max-subtracted softmax of a 2-D tensor along rows or columns.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let x = self.value(a);
        check_finite("softmax", x)?;
        let (r, c) = x.dims2("softmax")?;
        let src = x.data();
        let mut out = vec![F::zero(); r * c];
        match axis {
            Axis::Row => {
                for i in 0..r {
                    let row = &src[i * c..(i + 1) * c];
                    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let dst = &mut out[i * c..(i + 1) * c];
                    let mut s = F::zero();
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d = (v - m).exp();
                        s += *d;
                    }
                    for d in dst.iter_mut() {
                        *d /= s;
                    }
                }
            }
            Axis::Col => {
                let mut m = vec![F::neg_infinity(); c];
                for row in src.chunks_exact(c) {
                    for (mm, &v) in m.iter_mut().zip(row) {
                        *mm = mm.max(v);
                    }
                }
                let mut s = vec![F::zero(); c];
                for (dst, row) in out.chunks_exact_mut(c).zip(src.chunks_exact(c)) {
                    for j in 0..c {
                        dst[j] = (row[j] - m[j]).exp();
                        s[j] += dst[j];
                    }
                }
                for dst in out.chunks_exact_mut(c) {
                    for j in 0..c {
                        dst[j] /= s[j];
                    }
                }
            }
        }
        let out = Tensor::new(&[r, c], out)?;
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    /// Per-row layer normalization of an `n×c` tensor with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.dims2("layer_norm")?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return Err(Error::shape("layer_norm", xv.shape(), g.shape()));
        }
        let cf = F::of(c as f64);
        let mut xhat = vec![F::zero(); n * c];
        let mut rstd = vec![F::zero(); n];
        let mut out = vec![F::zero(); n * c];
        for i in 0..n {
            let row = &xv.data()[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let r = F::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..c {
                let h = (row[j] - mean) * r;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Cross-correlation of a `cin×h×w` map with `cout×cin×kh×kw` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3("conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let [cout, wcin, kh, kw] = ws[..] else {
            return Err(Error::shape("conv2d", &[cin, h, wd], &ws));
        };
        if wcin != cin {
            return Err(Error::shape("conv2d", &[cin, h, wd], &ws));
        }
        if self.value(b).numel() != cout {
            return Err(Error::shape("conv2d", &ws, self.value(b).shape()));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if ph < kh || pw < kw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d: kernel {kh}x{kw}, stride {stride}, pad {pad} do not tile a {h}x{wd} input"
            )));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        };
        let p = geom.oh * geom.ow;
        let k = geom.col_rows();
        let col = if geom.is_pointwise() {
            None
        } else {
            Some(im2col(self.value(x).data(), &geom))
        };
        let mut out = vec![F::zero(); cout * p];
        {
            let colref = col.as_deref().unwrap_or(self.value(x).data());
            gemm(false, false, cout, k, p, self.value(w).data(), colref, &mut out, false);
        }
        let bias = self.value(b).data();
        for (o, row) in out.chunks_exact_mut(p).enumerate() {
            for v in row {
                *v += bias[o];
            }
        }
        let out = Tensor::new(&[cout, geom.oh, geom.ow], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, col }, &[x, w, b]))
    }

    /// 2×2 max pooling with stride 2 on a `c×h×w` map; ties go to the first tap.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("max_pool2: odd extent {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut at = 0usize;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > best {
                            best = src[idx];
                            at = idx;
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = at as u32;
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Bilinear upsampling of a `c×h×w` map by 2 or 4 (half-pixel centres).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor != 2 && factor != 4 {
            return Err(Error::Config(format!("upsample factor {factor} not in {{2, 4}}")));
        }
        let (c, h, w) = self.value(x).dims3("upsample")?;
        let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); c * oh * ow];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let (ly, hy) = (F::of(ly), F::of(1.0 - ly));
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let (lx, hx) = (F::of(lx), F::of(1.0 - lx));
                    let v = hy * (hx * plane[y0 * w + x0] + lx * plane[y0 * w + x1])
                        + ly * (hx * plane[y1 * w + x0] + lx * plane[y1 * w + x1]);
                    out[(ch * oh + oy) * ow + ox] = v;
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(out, Op::Upsample { x, factor }, &[x]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// `c×h×w` feature map to an `(h·w)×c` token matrix (position-major).
    pub fn map_to_tokens(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("map_to_tokens")?;
        let flat = self.reshape(x, &[c, h * w])?;
        self.transpose(flat)
    }

    /// Inverse of [`Tape::map_to_tokens`].
    pub fn tokens_to_map(&mut self, t: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = self.value(t).dims2("tokens_to_map")?;
        if n != h * w {
            return Err(Error::shape("tokens_to_map", &[n, c], &[h, w]));
        }
        let ct = self.transpose(t)?;
        self.reshape(ct, &[c, h, w])
    }

    /// Stack 2-D tensors with equal column count along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows: no parts".into()))?;
        let (_, c) = self.value(first).dims2("concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).dims2("concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Join 2-D tensors with equal row count along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols: no parts".into()))?;
        let (r, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &pc) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * pc..(i + 1) * pc]);
            }
        }
        let out = Tensor::new(&[r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, len]));
        }
        let src = self.value(x).data();
        let data = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let out = Tensor::new(&[r, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().copied().sum::<F>() / F::of(x.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`,
    /// with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: &Tensor<F>, eps: F) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != target.shape() {
            return Err(Error::shape("bce", pv.shape(), target.shape()));
        }
        check_finite("bce", pv)?;
        let hi = F::one() - eps;
        let n = F::of(pv.numel() as f64);
        let total = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&q, &s)| {
                let q = q.max(eps).min(hi);
                -(s * q.ln() + (F::one() - s) * (F::one() - q).ln())
            })
            .sum::<F>();
        let out = Tensor::scalar(total / n);
        Ok(self.push(
            out,
            Op::Bce {
                p,
                target: target.data().to_vec(),
                eps,
            },
            &[p],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut kept: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) || i == loss.0 {
                kept[i] = Some(Tensor::new(node.value.shape(), g.clone())?);
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: kept })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul").expect("2-D");
                let n = self.value(*b).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(false, true, m, n, k, g, self.value(*b).data(), ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(true, false, k, m, n, self.value(*a).data(), g, gb, true);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2("transpose").expect("2-D");
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let c = gb.len();
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * *s);
                }
            }
            Op::Relu(a) => {
                let out = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gg), &o) in ga.iter_mut().zip(g).zip(out) {
                        if o > F::zero() {
                            *d += gg;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gg), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d += gg * y * (F::one() - y);
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (r, c) = node.value.dims2("softmax").expect("2-D");
                let sign = if self.fault == Some(Fault::SoftmaxBackwardSign) {
                    -F::one()
                } else {
                    F::one()
                };
                if let Some(ga) = self.slot(grads, *a) {
                    match axis {
                        Axis::Row => {
                            for i in 0..r {
                                let span = i * c..(i + 1) * c;
                                let dot: F = g[span.clone()].iter().zip(&y[span.clone()]).map(|(&p, &q)| p * q).sum();
                                for j in span {
                                    ga[j] += sign * y[j] * (g[j] - dot);
                                }
                            }
                        }
                        Axis::Col => {
                            let mut dot = vec![F::zero(); c];
                            for (gr, yr) in g.chunks_exact(c).zip(y.chunks_exact(c)) {
                                for ((d, &gv), &yv) in dot.iter_mut().zip(gr).zip(yr) {
                                    *d += gv * yv;
                                }
                            }
                            for i in 0..r {
                                for (j, &d) in dot.iter().enumerate() {
                                    let k = i * c + j;
                                    ga[k] += sign * y[k] * (g[k] - d);
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).numel();
                let n = rstd.len();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for i in 0..n {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                }
                let gamma_v = self.value(*gamma).data().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    let cf = F::of(c as f64);
                    let mut dxhat = vec![F::zero(); c];
                    for i in 0..n {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gamma_v[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[i * c + j];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, col } => {
                let p = geom.oh * geom.ow;
                let k = geom.col_rows();
                if let Some(gb) = self.slot(grads, *b) {
                    for (o, row) in g.chunks_exact(p).enumerate() {
                        gb[o] += row.iter().copied().sum::<F>();
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    let colref = col.as_deref().unwrap_or(self.value(*x).data());
                    gemm(false, true, geom.cout, p, k, g, colref, gw, true);
                }
                let wv = self.value(*w).data();
                if let Some(gx) = self.slot(grads, *x) {
                    if geom.is_pointwise() {
                        gemm(true, false, k, geom.cout, p, wv, g, gx, true);
                    } else {
                        let mut gcol = vec![F::zero(); k * p];
                        gemm(true, false, k, geom.cout, p, wv, g, &mut gcol, false);
                        col2im_add(&gcol, geom, gx);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&at, &gg) in argmax.iter().zip(g) {
                        gx[at as usize] += gg;
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let (c, h, w) = self.value(*x).dims3("upsample").expect("3-D");
                let (ty, tx) = (bilinear_taps(h, *factor), bilinear_taps(w, *factor));
                let (oh, ow) = (h * factor, w * factor);
                if let Some(gx) = self.slot(grads, *x) {
                    for ch in 0..c {
                        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                            let (ly, hy) = (F::of(ly), F::of(1.0 - ly));
                            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                                let (lx, hx) = (F::of(lx), F::of(1.0 - lx));
                                let gg = g[(ch * oh + oy) * ow + ox];
                                plane[y0 * w + x0] += gg * hy * hx;
                                plane[y0 * w + x1] += gg * hy * lx;
                                plane[y1 * w + x0] += gg * ly * hx;
                                plane[y1 * w + x1] += gg * ly * lx;
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(d, &s)| *d += s);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut start = 0;
                for &p in parts {
                    let (r, pc) = self.value(p).dims2("concat_cols").expect("2-D");
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..r {
                            let src = &g[i * total + start..i * total + start + pc];
                            gp[i * pc..(i + 1) * pc].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    start += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2("slice_cols").expect("2-D");
                let len = node.value.shape()[1];
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        gx[i * c + start..i * c + start + len]
                            .iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g[0] / F::of(ga.len() as f64);
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Bce { p, target, eps } => {
                let pv = self.value(*p).data();
                let hi = F::one() - *eps;
                if let Some(gp) = self.slot(grads, *p) {
                    let scale = g[0] / F::of(pv.len() as f64);
                    for ((d, &q), &s) in gp.iter_mut().zip(pv).zip(target) {
                        if q > *eps && q < hi {
                            *d += scale * (q - s) / (q * (F::one() - q));
                        }
                    }
                }
            }
        }
    }
}

fn im2col<F: Element>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let p = g.oh * g.ow;
    let mut col = vec![F::zero(); g.col_rows() * p];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<F: Element>(col: &[F], g: &ConvGeom, gx: &mut [F]) {
    let p = g.oh * g.ow;
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            gx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
