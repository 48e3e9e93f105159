//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every op applied during one forward pass. Nodes are
//! appended in evaluation order, so the tape is already topologically sorted
//! and [`Graph::backward`] simply walks it in reverse.
//!
//! Feature maps use the `H×W×C` (channels-last) layout; embedding sets and
//! other matrices are `rows×cols`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::{self, gemm};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of an element-wise binary op is expanded to the
/// left operand's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is `[C]`, repeated over every leading position.
    Channel,
    /// rhs is the lhs shape with the last extent set to 1.
    Spatial,
    Scalar,
}

impl Broadcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            return Ok(Broadcast::Same);
        }
        let c = *lhs.last().unwrap();
        if rhs == [c] {
            return Ok(Broadcast::Channel);
        }
        if rhs.len() == lhs.len() && rhs[..rhs.len() - 1] == lhs[..lhs.len() - 1] && rhs[rhs.len() - 1] == 1 {
            return Ok(Broadcast::Spatial);
        }
        if rhs.iter().product::<usize>() == 1 {
            return Ok(Broadcast::Scalar);
        }
        Err(Error::shape(op, lhs, rhs))
    }

    #[inline]
    fn index(self, i: usize, channels: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Channel => i % channels,
            Broadcast::Spatial => i / channels,
            Broadcast::Scalar => 0,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Reshape(Var),
    SumAll(Var),
    SumSpatial(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        cols: Vec<f64>,
    },
    /// Normalization over contiguous rows of the last axis (LayerNorm).
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Normalization over all leading positions, per channel (InstanceNorm).
    InstanceNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatLast(Vec<Var>),
    SliceLast { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ResizeNearest { x: Var, src_index: Vec<usize> },
    SoftmaxRows { x: Var, tau: f64 },
    MaxRows { x: Var, argmax: Vec<usize> },
    RepeatRows(Var),
    FocalLoss {
        logits: Var,
        classes: Vec<usize>,
        alpha: f64,
        gamma: f64,
    },
    IouLoss {
        pred: Var,
        target: Vec<f64>,
        positive: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Graph::backward`], if `v` was on
    /// a differentiable path to the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Binds a stored parameter as a differentiable leaf. Binding the same
    /// name twice returns the same node, so every use of a parameter shares
    /// one gradient slot.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_lookup.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        self.param_lookup.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.param_lookup.get(name).copied()
    }

    /// Parameters bound to this graph, in binding order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Gradients of every bound parameter after [`Graph::backward`]. A
    /// parameter that is off the loss path reports a zero gradient.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(name, v)| {
                let shape = self.shape(*v);
                let g = match self.grad(*v) {
                    Some(g) => Tensor::new(shape, g.to_vec()).unwrap(),
                    None => Tensor::zeros(shape),
                };
                (name.clone(), g)
            })
            .collect()
    }

    // ---------------------------------------------------------------- ops

    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(false, false, m, n, k, self.value(a).data(), self.value(b).data(), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(x), rg))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Broadcast)> {
        let mode = Broadcast::resolve(op, self.shape(a), self.shape(b))?;
        let ta = self.value(a);
        let tb = self.value(b).data();
        let c = ta.last_dim();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb[mode.index(i, c)]))
            .collect();
        Ok((Tensor::new(ta.shape(), out)?, mode))
    }

    /// Element-wise `a + b`; `b` may be `[C]`, `[..., 1]` or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, mode) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b, mode), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("sub", self.shape(a), self.shape(b)));
        }
        let (t, _) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Element-wise `a ⊙ b` with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, mode) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b, mode), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * s).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v.exp()).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Global sum pooling: `[..., C] -> [C]`.
    pub fn sum_spatial(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.last_dim();
        let mut out = vec![0.0; c];
        for row in t.data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(out), Op::SumSpatial(x), rg)
    }

    /// 3×3 convolution with zero padding 1 over an `H×W×Cin` map.
    /// `w` is `[3, 3, Cin, Cout]`, `b` is `[Cout]`. Output extents are
    /// `ceil(H/stride) × ceil(W/stride)`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[2] {
            return Err(Error::shape("conv3x3", sx, sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv3x3", "stride must be positive"));
        }
        let (h, wd, cin, cout) = (sx[0], sx[1], sx[2], sw[3]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv3x3", sw, self.shape(b)));
            }
        }
        let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
        let cols = numeric::im2col(self.value(x).data(), h, wd, cin, stride);
        let mut out = vec![0.0; ho * wo * cout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(false, false, ho * wo, cout, 9 * cin, &cols, self.value(w).data(), beta, &mut out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let op = Op::Conv2d {
            x,
            w,
            b,
            stride,
            cols,
        };
        Ok(self.push(Tensor::new(&[ho, wo, cout], out)?, op, rg))
    }

    /// Affine map of every row: `x [n, in] @ w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Normalizes each row over the last axis (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, row) in t.data().chunks_exact(d).enumerate() {
            let (mean, var) = numeric::mean_var(row.iter().copied());
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let out = Tensor::new(t.shape(), xhat.clone()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, xhat, inv_std }, rg)
    }

    /// Per-channel normalization over all spatial positions of an
    /// `H×W×C` map (no affine part).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (xhat, inv_std) = numeric::instance_norm_parts(t.data(), t.last_dim(), eps);
        let out = Tensor::new(t.shape(), xhat.clone()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::InstanceNorm { x, xhat, inv_std }, rg)
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let positions: usize = lead.iter().product();
        let mut out = Vec::with_capacity(positions * total);
        for pos in 0..positions {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[pos * w..(pos + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_last",
                format!("range {start}..{} out of bounds for {:?}", start + len, t.shape()),
            ));
        }
        let out: Vec<f64> = t
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SliceLast { x, start }, rg))
    }

    /// Rows `start..start+len` of the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape()[0];
        if len == 0 || start + len > rows {
            return Err(Error::invalid(
                "slice_rows",
                format!("range {start}..{} out of bounds for {:?}", start + len, t.shape()),
            ));
        }
        let stride = t.numel() / rows;
        let out = t.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SliceRows { x, start }, rg))
    }

    /// Nearest-neighbour resize of an `H×W×C` map.
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_nearest", s, &[out_h, out_w]));
        }
        let (h, w) = (s[0], s[1]);
        let src_index: Vec<usize> = (0..out_h)
            .flat_map(|r| {
                let sr = (r * h / out_h).min(h - 1);
                (0..out_w).map(move |c| sr * w + (c * w / out_w).min(w - 1))
            })
            .collect();
        let t = self.value(x);
        let ch = t.last_dim();
        let mut out = Vec::with_capacity(out_h * out_w * ch);
        for &si in &src_index {
            out.extend_from_slice(&t.data()[si * ch..(si + 1) * ch]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[out_h, out_w, ch], out)?,
            Op::ResizeNearest { x, src_index },
            rg,
        ))
    }

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::invalid("softmax", format!("expected a matrix, got {:?}", t.shape())));
        }
        let k = t.last_dim();
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(k) {
            out.extend(numeric::softmax_scaled(row, tau)?);
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows { x, tau }, rg))
    }

    /// Column-wise max over rows: `[n, d] -> [1, d]`.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::invalid("max_rows", format!("expected a matrix, got {:?}", t.shape())));
        }
        let d = t.last_dim();
        let mut best = t.data()[..d].to_vec();
        let mut argmax = vec![0; d];
        for (r, row) in t.data().chunks_exact(d).enumerate().skip(1) {
            for c in 0..d {
                if row[c] > best[c] {
                    best[c] = row[c];
                    argmax[c] = r;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[1, d], best)?, Op::MaxRows { x, argmax }, rg))
    }

    /// `[1, d] -> [n, d]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != 1 || n == 0 {
            return Err(Error::shape("repeat_rows", t.shape(), &[n]));
        }
        let d = t.last_dim();
        let out = t.data().repeat(n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, d], out)?, Op::RepeatRows(x), rg))
    }

    /// Sigmoid focal loss summed over every `(location, class)` pair.
    /// `classes[i] == K` marks background.
    pub fn focal_loss(&mut self, logits: Var, classes: &[usize], alpha: f64, gamma: f64) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != classes.len() {
            return Err(Error::shape("focal_loss", t.shape(), &[classes.len()]));
        }
        let k = t.last_dim();
        let mut total = 0.0;
        for (row, &cls) in t.data().chunks_exact(k).zip(classes) {
            for (c, &x) in row.iter().enumerate() {
                total += numeric::focal_term(x, c == cls, alpha, gamma).0;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::FocalLoss {
                logits,
                classes: classes.to_vec(),
                alpha,
                gamma,
            },
            rg,
        ))
    }

    /// `-ln IoU` between predicted and target `(l, t, r, b)` distances,
    /// summed over rows where `positive` is set. Predictions must be > 0.
    pub fn iou_loss(&mut self, pred: Var, target: &Tensor, positive: &[bool]) -> Result<Var> {
        let t = self.value(pred);
        if t.shape() != target.shape() || t.rank() != 2 || t.last_dim() != 4 || positive.len() != t.shape()[0] {
            return Err(Error::shape("iou_loss", t.shape(), target.shape()));
        }
        let mut total = 0.0;
        for ((p, g), &pos) in t.data().chunks_exact(4).zip(target.data().chunks_exact(4)).zip(positive) {
            if pos {
                total += numeric::iou_term(p, g).0;
            }
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::IouLoss {
                pred,
                target: target.data().to_vec(),
                positive: positive.to_vec(),
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a one-element `loss`. Gradients from earlier
    /// calls are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must have one element, got {:?}", self.shape(loss)),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Ops only read their own saved state and their inputs' values, and
        // only write gradients of earlier nodes, so splitting the borrow of
        // `nodes` and `grads` is sound.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();
        let mut grads = std::mem::take(&mut self.grads);
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(&nodes, &mut grads, $v)
            };
        }

        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                if let Some(ga) = acc!(*a) {
                    gemm(false, true, m, k, n, g, val(*b), 1.0, ga);
                }
                if let Some(gb) = acc!(*b) {
                    gemm(true, false, k, n, m, val(*a), g, 1.0, gb);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (shape(*x)[0], shape(*x)[1]);
                if let Some(gx) = acc!(*x) {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b, mode) => {
                let c = node.value.last_dim();
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    for (j, gv) in g.iter().enumerate() {
                        gb[mode.index(j, c)] += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    for (o, gv) in gb.iter_mut().zip(g) {
                        *o -= gv;
                    }
                }
            }
            Op::Mul(a, b, mode) => {
                let c = node.value.last_dim();
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    for (j, gv) in g.iter().enumerate() {
                        ga[j] += gv * vb[mode.index(j, c)];
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for (j, gv) in g.iter().enumerate() {
                        gb[mode.index(j, c)] += gv * va[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = acc!(*x) {
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += s * gv;
                    }
                }
            }
            Op::Relu(x) => {
                let out = node.value.data();
                if let Some(gx) = acc!(*x) {
                    for ((o, gv), y) in gx.iter_mut().zip(g).zip(out) {
                        if *y > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                let out = node.value.data();
                if let Some(gx) = acc!(*x) {
                    for ((o, gv), y) in gx.iter_mut().zip(g).zip(out) {
                        *o += gv * y;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    add_into(gx, g);
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = acc!(*x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::SumSpatial(x) => {
                let c = g.len();
                if let Some(gx) = acc!(*x) {
                    for row in gx.chunks_exact_mut(c) {
                        add_into(row, g);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                cols,
            } => {
                let sx = shape(*x);
                let (h, wd, cin) = (sx[0], sx[1], sx[2]);
                let cout = shape(*w)[3];
                let positions = node.value.numel() / cout;
                if let Some(gw) = acc!(*w) {
                    gemm(true, false, 9 * cin, cout, positions, cols, g, 1.0, gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = acc!(*b) {
                        for row in g.chunks_exact(cout) {
                            add_into(gb, row);
                        }
                    }
                }
                if nodes[x.0].requires_grad {
                    let mut gcols = vec![0.0; positions * 9 * cin];
                    gemm(false, true, positions, 9 * cin, cout, g, val(*w), 0.0, &mut gcols);
                    let gx = acc!(*x).unwrap();
                    numeric::col2im_add(&gcols, h, wd, cin, *stride, gx);
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let d = node.value.last_dim();
                if let Some(gx) = acc!(*x) {
                    for (r, is) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        norm_backward(&g[span.clone()], &xhat[span.clone()], *is, 1, &mut gx[span]);
                    }
                }
            }
            Op::InstanceNorm { x, xhat, inv_std } => {
                let c = node.value.last_dim();
                if let Some(gx) = acc!(*x) {
                    numeric::instance_norm_backward(g, xhat, inv_std, c, gx);
                }
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let positions = node.value.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    if let Some(gp) = acc!(p) {
                        for pos in 0..positions {
                            add_into(&mut gp[pos * w..(pos + 1) * w], &g[pos * total + offset..pos * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                let c = nodes[x.0].value.last_dim();
                let len = node.value.last_dim();
                if let Some(gx) = acc!(*x) {
                    for (row, grow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        add_into(&mut row[*start..start + len], grow);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let t = &nodes[x.0].value;
                let stride = t.numel() / t.shape()[0];
                if let Some(gx) = acc!(*x) {
                    add_into(&mut gx[start * stride..start * stride + g.len()], g);
                }
            }
            Op::ResizeNearest { x, src_index } => {
                let c = node.value.last_dim();
                if let Some(gx) = acc!(*x) {
                    for (k, &si) in src_index.iter().enumerate() {
                        add_into(&mut gx[si * c..(si + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::SoftmaxRows { x, tau } => {
                let k = node.value.last_dim();
                let y = node.value.data();
                if let Some(gx) = acc!(*x) {
                    for ((grow, yrow), orow) in g.chunks_exact(k).zip(y.chunks_exact(k)).zip(gx.chunks_exact_mut(k)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            orow[j] += yrow[j] * (grow[j] - dot) / tau;
                        }
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                let d = argmax.len();
                if let Some(gx) = acc!(*x) {
                    for (c, &r) in argmax.iter().enumerate() {
                        gx[r * d + c] += g[c];
                    }
                }
            }
            Op::RepeatRows(x) => {
                let d = node.value.last_dim();
                if let Some(gx) = acc!(*x) {
                    for row in g.chunks_exact(d) {
                        add_into(gx, row);
                    }
                }
            }
            Op::FocalLoss {
                logits,
                classes,
                alpha,
                gamma,
            } => {
                let k = nodes[logits.0].value.last_dim();
                let xs = val(*logits);
                if let Some(gl) = acc!(*logits) {
                    for (r, &cls) in classes.iter().enumerate() {
                        for c in 0..k {
                            let j = r * k + c;
                            gl[j] += g[0] * numeric::focal_term(xs[j], c == cls, *alpha, *gamma).1;
                        }
                    }
                }
            }
            Op::IouLoss {
                pred,
                target,
                positive,
            } => {
                let p = val(*pred);
                if let Some(gp) = acc!(*pred) {
                    for (r, &pos) in positive.iter().enumerate() {
                        if pos {
                            let d = numeric::iou_term(&p[r * 4..r * 4 + 4], &target[r * 4..r * 4 + 4]).1;
                            for q in 0..4 {
                                gp[r * 4 + q] += g[0] * d[q];
                            }
                        }
                    }
                }
            }
        }
        self.nodes = nodes;
        self.grads = grads;
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Backward of `y = (x - mean) * inv_std` over one normalization group
/// whose elements sit `stride` apart.
fn norm_backward(g: &[f64], xhat: &[f64], inv_std: f64, stride: usize, gx: &mut [f64]) {
    let n = (g.len() / stride) as f64;
    let mut mean_g = 0.0;
    let mut mean_gx = 0.0;
    for j in (0..g.len()).step_by(stride) {
        mean_g += g[j];
        mean_gx += g[j] * xhat[j];
    }
    mean_g /= n;
    mean_gx /= n;
    for j in (0..g.len()).step_by(stride) {
        gx[j] += inv_std * (g[j] - mean_g - xhat[j] * mean_gx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let (h, w, c) = (5, 4, 3);
        let data: Vec<f64> = (0..h * w * c).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut kernel = vec![0.0; 9 * c * c];
        for ch in 0..c {
            kernel[(4 * c + ch) * c + ch] = 1.0;
        }
        let mut g = Graph::new();
        let x = g.constant(t(&[h, w, c], &data));
        let k = g.constant(t(&[3, 3, c, c], &kernel));
        let b = g.constant(Tensor::zeros(&[c]));
        let y = g.conv3x3(x, k, Some(b), 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn strided_conv_output_extents() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[7, 8, 2]));
        let k = g.constant(Tensor::zeros(&[3, 3, 2, 5]));
        let y = g.conv3x3(x, k, None, 2).unwrap();
        assert_eq!(g.shape(y), &[4, 4, 5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4]));
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[4]"), "{err}");
        let x = g.constant(Tensor::zeros(&[4, 4, 3]));
        let k = g.constant(Tensor::zeros(&[3, 3, 2, 5]));
        let err = g.conv3x3(x, k, None, 1).unwrap_err().to_string();
        assert!(err.contains("conv3x3") && err.contains("[4, 4, 3]"), "{err}");
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[1.0, -2.0, 0.5]), true);
        let d = g.detach(x);
        let y = g.mul(d, d).unwrap();
        let y2 = g.scale(y, 3.0);
        let loss = g.sum_all(y2);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn detach_mixed_path_keeps_live_branch() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.5, -1.0]), true);
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        // d/dx (x * stopgrad(x)) = stopgrad(x)
        assert_eq!(g.grad(x).unwrap(), &[1.5, -1.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]), true);
        let unused = g.input(t(&[2], &[3.0, 4.0]), true);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert!(g.grad(unused).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[3.0]), true);
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 5.0);
        let s = g.add(a, b).unwrap();
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn channel_and_spatial_broadcast() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.constant(t(&[2], &[10.0, 20.0]));
        let s = g.constant(t(&[2, 1], &[100.0, 200.0]));
        let a = g.add(x, c).unwrap();
        assert_eq!(g.value(a).data(), &[11.0, 22.0, 13.0, 24.0]);
        let m = g.mul(x, s).unwrap();
        assert_eq!(g.value(m).data(), &[100.0, 200.0, 600.0, 800.0]);
    }

    #[test]
    fn resize_nearest_doubles() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 1], &[1.0, 2.0]));
        let y = g.resize_nearest(x, 2, 4).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn shared_param_binding_is_one_node() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![2.0])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        assert!(g.param(&store, "missing").is_err());
    }
}
