use std::ops::AddAssign;

use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arithmetic operation tally. Multiplications, additions and activation
/// evaluations each count as one operation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OpCount {
    pub mul: u64,
    pub add: u64,
    pub act: u64,
}

impl OpCount {
    pub fn new(mul: u64, add: u64, act: u64) -> Self {
        OpCount { mul, add, act }
    }

    pub fn total(&self) -> u64 {
        self.mul + self.add + self.act
    }

    pub fn scaled(&self, factor: u64) -> Self {
        OpCount::new(self.mul * factor, self.add * factor, self.act * factor)
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, rhs: OpCount) {
        self.mul += rhs.mul;
        self.add += rhs.add;
        self.act += rhs.act;
    }
}

impl std::ops::Add for OpCount {
    type Output = OpCount;
    fn add(mut self, rhs: OpCount) -> OpCount {
        self += rhs;
        self
    }
}

enum Op<S> {
    Leaf,
    /// `a·b`, or `a·bᵀ` when `trans_b`.
    MatMul { a: Var, b: Var, trans_b: bool },
    /// Binary elementwise op; `broadcast` means `b` is a vector repeated over
    /// the leading rows of `a`.
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var, broadcast: bool },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<Vec<S>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        batch_stats: bool,
    },
    MeanPool2(Var),
    GlobalAvgPool(Var),
    PadTail(Var),
    ConcatCols(Var, Var),
    ShortcutPad { x: Var, stride: usize },
    BroadcastRows(Var),
    SoftmaxCrossEntropy { logits: Var, probs: Vec<S>, labels: Vec<usize> },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Ordered record of operations. Nodes are appended as they are computed, so
/// the record is always in topological order and backward is a single
/// reverse sweep.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    ops: OpCount,
    flipped: Vec<usize>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::dim(op, shape, &[4])),
    }
}

fn shape2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::dim(op, shape, &[2])),
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Output extent of a convolution along one axis.
pub(crate) fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - kernel) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    img: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut cols = vec![S::zero(); c * k * k * oh * ow];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &img[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    img: &mut [S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] = img[base + ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, delta: Vec<S>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(delta) {
                *a = *a + b;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: OpCount::default(),
            flipped: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operations executed by forward computations recorded so far.
    pub fn op_count(&self) -> OpCount {
        self.ops
    }

    pub fn reset_op_count(&mut self) {
        self.ops = OpCount::default();
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Fault injection for verifying gradient checks: the gradient leaving
    /// `v` towards its inputs is negated during backward.
    #[doc(hidden)]
    pub fn flip_backward_sign(&mut self, v: Var) {
        self.flipped.push(v.0);
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Parameters are leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = shape2("matmul", sa).map_err(|_| Error::dim("matmul", sa, sb))?;
        let (r, c) = shape2("matmul", sb).map_err(|_| Error::dim("matmul", sa, sb))?;
        let (k2, n) = if trans_b { (c, r) } else { (r, c) };
        if k != k2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(
            false,
            trans_b,
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            self.value(b).data(),
            S::zero(),
            &mut out,
        );
        let mn = (m * n) as u64;
        self.ops += OpCount::new(mn * k as u64, mn * (k as u64).saturating_sub(1), 0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::MatMul { a, b, trans_b }))
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product with the right operand transposed: `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(false);
        }
        match (sa.last(), sb) {
            (Some(&last), &[len]) if sa.len() >= 2 && last == len => Ok(true),
            _ => Err(Error::dim(op, sa, sb)),
        }
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let name = if mul { "mul" } else { "add" };
        let broadcast = self.broadcast_kind(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let width = vb.len();
        let data: Vec<S> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if broadcast { vb[i % width] } else { vb[i] };
                if mul {
                    x * y
                } else {
                    x + y
                }
            })
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        let count = out.len() as u64;
        self.ops += if mul {
            OpCount::new(count, 0, 0)
        } else {
            OpCount::new(0, count, 0)
        };
        let rg = self.rg(&[a, b]);
        let op = if mul {
            Op::Mul { a, b, broadcast }
        } else {
            Op::Add { a, b, broadcast }
        };
        Ok(self.push(out, rg, op))
    }

    /// Elementwise sum; `b` may be a vector broadcast over the trailing axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product; `b` may be a vector broadcast over the trailing axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.value(a).map(f);
        self.ops += OpCount::new(0, 0, out.len() as u64);
        let rg = self.rg(&[a]);
        self.push(out, rg, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(S::zero()), Op::Relu(a))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum();
        self.ops += OpCount::new(0, (v.len() as u64).saturating_sub(1), 0);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Flattens everything but the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let lead = *shape
            .first()
            .ok_or_else(|| Error::dim("flatten", shape, &[2]))?;
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, &[lead, rest])
    }

    /// Cross-correlation of `x[b×c×H×W]` with `w[o×c×k×k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (b, c, h, wd) = shape4("conv2d", self.shape(x))?;
        let (o, ci, k, k2) = shape4("conv2d", self.shape(w))?;
        if ci != c || k != k2 {
            return Err(Error::dim("conv2d", self.shape(x), self.shape(w)));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::dim("conv2d", self.shape(x), self.shape(w)));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(Error::dim("conv2d bias", self.shape(bv), &[o]));
            }
        }
        let oh = conv_out_extent(h, k, stride, pad);
        let ow = conv_out_extent(wd, k, stride, pad);
        let ckk = c * k * k;
        let pix = oh * ow;
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let mut out = vec![S::zero(); b * o * pix];
        let mut saved = Vec::with_capacity(b);
        for n in 0..b {
            let img = &xin[n * c * h * wd..(n + 1) * c * h * wd];
            let cols = im2col(img, c, h, wd, k, stride, pad, oh, ow);
            gemm(
                false,
                false,
                o,
                ckk,
                pix,
                S::one(),
                wt,
                &cols,
                S::zero(),
                &mut out[n * o * pix..(n + 1) * o * pix],
            );
            saved.push(cols);
        }
        let outputs = (b * o * pix) as u64;
        let mut count = OpCount::new(outputs * ckk as u64, outputs * (ckk as u64 - 1), 0);
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for n in 0..b {
                for (oc, &bb) in bd.iter().enumerate() {
                    let base = (n * o + oc) * pix;
                    out[base..base + pix].iter_mut().for_each(|v| *v = *v + bb);
                }
            }
            count.add += outputs;
        }
        self.ops += count;
        let mut vars = vec![x, w];
        vars.extend(bias);
        let rg = self.rg(&vars);
        let value = Tensor::new(&[b, o, oh, ow], out)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                cols: if rg { saved } else { Vec::new() },
            },
        ))
    }

    /// Per-map normalisation of `x[b×c×H×W]`. With `stats == None` the batch
    /// statistics are used and returned as `(mean, biased variance)`;
    /// otherwise the given `(mean, variance)` are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[S], &[S])>,
        eps: S,
    ) -> Result<(Var, Vec<S>, Vec<S>)> {
        let (b, c, h, w) = shape4("batch_norm", self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let hw = h * w;
        let count = S::from_usize(b * hw).unwrap();
        let xv = self.value(x).data();
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::dim("batch_norm stats", &[c], &[m.len(), v.len()]));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                if b < 2 {
                    return Err(Error::Contract(format!(
                        "batch_norm in train mode needs batch >= 2, got {b}"
                    )));
                }
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for ch in 0..c {
                    let mut s = S::zero();
                    for n in 0..b {
                        let base = (n * c + ch) * hw;
                        s = s + xv[base..base + hw].iter().copied().sum::<S>();
                    }
                    let m = s / count;
                    let mut q = S::zero();
                    for n in 0..b {
                        let base = (n * c + ch) * hw;
                        for &v in &xv[base..base + hw] {
                            q = q + (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / count;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let numel = xv.len() as u64;
        self.ops += OpCount::new(2 * numel, 2 * numel, 0);
        let rg = self.rg(&[x, gamma, beta]);
        let value = Tensor::new(self.shape(x), out)?;
        let var_out = self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: stats.is_none(),
            },
        );
        Ok((var_out, mean, var))
    }

    /// Non-overlapping 2×2 average pooling.
    pub fn meanpool2x2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = shape4("meanpool2x2", self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("meanpool2x2", self.shape(x), &[2, 2]));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = S::from_f64_lossy(0.25);
        let mut out = vec![S::zero(); b * c * oh * ow];
        for m in 0..b * c {
            let src = &xv[m * h * w..(m + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * w + 2 * ox;
                    out[(m * oh + oy) * ow + ox] =
                        (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let outputs = out.len() as u64;
        self.ops += OpCount::new(outputs, 3 * outputs, 0);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[b, c, oh, ow], out)?, rg, Op::MeanPool2(x)))
    }

    /// Mean over the spatial extent: `[b×c×H×W] -> [b×c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = shape4("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        let scale = S::one() / S::from_usize(hw).unwrap();
        let xv = self.value(x).data();
        let out: Vec<S> = (0..b * c)
            .map(|m| xv[m * hw..(m + 1) * hw].iter().copied().sum::<S>() * scale)
            .collect();
        let maps = (b * c) as u64;
        self.ops += OpCount::new(maps, maps * (hw as u64 - 1), 0);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[b, c], out)?, rg, Op::GlobalAvgPool(x)))
    }

    /// Appends zero columns to `x[b×d]` up to `width`.
    pub fn pad_tail(&mut self, x: Var, width: usize) -> Result<Var> {
        let (b, d) = shape2("pad_tail", self.shape(x))?;
        if d > width {
            return Err(Error::Contract(format!(
                "pad_tail: input width {d} exceeds target width {width}"
            )));
        }
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); b * width];
        for r in 0..b {
            out[r * width..r * width + d].copy_from_slice(&xv[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[b, width], out)?, rg, Op::PadTail(x)))
    }

    /// Column-wise concatenation of `a[b×p]` and `c[b×q]`.
    pub fn concat_cols(&mut self, a: Var, c: Var) -> Result<Var> {
        let (ra, p) = shape2("concat_cols", self.shape(a))?;
        let (rc, q) = shape2("concat_cols", self.shape(c))?;
        if ra != rc {
            return Err(Error::dim("concat_cols", self.shape(a), self.shape(c)));
        }
        let av = self.value(a).data();
        let cv = self.value(c).data();
        let mut out = Vec::with_capacity(ra * (p + q));
        for r in 0..ra {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&cv[r * q..(r + 1) * q]);
        }
        let rg = self.rg(&[a, c]);
        Ok(self.push(Tensor::new(&[ra, p + q], out)?, rg, Op::ConcatCols(a, c)))
    }

    /// Parameter-free residual shortcut: spatial subsampling by `stride`
    /// followed by zero channels appended up to `out_maps`.
    pub fn shortcut_pad(&mut self, x: Var, out_maps: usize, stride: usize) -> Result<Var> {
        let (b, c, h, w) = shape4("shortcut_pad", self.shape(x))?;
        if out_maps < c || stride == 0 {
            return Err(Error::dim("shortcut_pad", self.shape(x), &[out_maps, stride]));
        }
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); b * out_maps * oh * ow];
        for n in 0..b {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[((n * out_maps + ch) * oh + oy) * ow + ox] =
                            xv[((n * c + ch) * h + oy * stride) * w + ox * stride];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[b, out_maps, oh, ow], out)?,
            rg,
            Op::ShortcutPad { x, stride },
        ))
    }

    /// Repeats vector `v[d]` as `rows` rows.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let d = match *self.shape(v) {
            [d] => d,
            _ => return Err(Error::dim("broadcast_rows", self.shape(v), &[1])),
        };
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(vv);
        }
        let rg = self.rg(&[v]);
        Ok(self.push(Tensor::new(&[rows, d], out)?, rg, Op::BroadcastRows(v)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = shape2("softmax_cross_entropy", self.shape(logits))?;
        if labels.len() != b {
            return Err(Error::dim("softmax_cross_entropy", &[b, k], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![S::zero(); b * k];
        let mut loss = S::zero();
        for r in 0..b {
            let row = &lv[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * k + j] = e;
                z = z + e;
            }
            for j in 0..k {
                probs[r * k + j] = probs[r * k + j] / z;
            }
            loss = loss - (row[labels[r]] - max - z.ln());
        }
        loss = loss / S::from_usize(b).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to whatever
    /// each node already holds, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if self.flipped.contains(&idx) {
                let negated: Vec<S> = g.iter().map(|&v| -v).collect();
                self.propagate(idx, &negated, &mut grads)?;
            } else {
                self.propagate(idx, &g, &mut grads)?;
            }
            let node = &mut self.nodes[idx];
            let g = Tensor::new(node.value.shape(), g)?;
            match &mut node.grad {
                Some(existing) => existing.add_assign(&g)?,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<S>>], to: Var, delta: Vec<S>) {
        if self.nodes[to.0].requires_grad {
            accumulate(&mut grads[to.0], delta);
        }
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = shape2("matmul", self.shape(*a))?;
                let n = node.value.shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    // dA = G·Bᵀ (or G·B when B was transposed)
                    let mut da = vec![S::zero(); m * k];
                    gemm(false, !trans_b, m, n, k, S::one(), g, bv, S::zero(), &mut da);
                    self.send(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![S::zero(); k * n];
                    if *trans_b {
                        // B is n×k: dB = Gᵀ·A
                        gemm(true, false, n, m, k, S::one(), g, av, S::zero(), &mut db);
                    } else {
                        gemm(true, false, k, m, n, S::one(), av, g, S::zero(), &mut db);
                    }
                    self.send(grads, *b, db);
                }
            }
            Op::Add { a, b, broadcast } => {
                self.send(grads, *a, g.to_vec());
                if self.requires_grad(*b) {
                    let db = if *broadcast {
                        let width = self.value(*b).len();
                        let mut db = vec![S::zero(); width];
                        for (i, &gi) in g.iter().enumerate() {
                            db[i % width] = db[i % width] + gi;
                        }
                        db
                    } else {
                        g.to_vec()
                    };
                    self.send(grads, *b, db);
                }
            }
            Op::Mul { a, b, broadcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let width = bv.len();
                if self.requires_grad(*a) {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * if *broadcast { bv[i % width] } else { bv[i] })
                        .collect();
                    self.send(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![S::zero(); width];
                    for (i, &gi) in g.iter().enumerate() {
                        let j = if *broadcast { i % width } else { i };
                        db[j] = db[j] + gi * av[i];
                    }
                    self.send(grads, *b, db);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let da = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * yi * (S::one() - yi))
                    .collect();
                self.send(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let da = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * (S::one() - yi * yi))
                    .collect();
                self.send(grads, *a, da);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() })
                    .collect();
                self.send(grads, *a, da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.send(grads, *a, vec![g[0]; n]);
            }
            Op::Reshape(a) => self.send(grads, *a, g.to_vec()),
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                cols,
            } => {
                let (b, c, h, wd) = shape4("conv2d", self.shape(*x))?;
                let (o, _, k, _) = shape4("conv2d", self.shape(*w))?;
                let (_, _, oh, ow) = shape4("conv2d", node.value.shape())?;
                let pix = oh * ow;
                let ckk = c * k * k;
                let wt = self.value(*w).data();
                if self.requires_grad(*w) {
                    let mut dw = vec![S::zero(); o * ckk];
                    for (n, col) in cols.iter().enumerate() {
                        gemm(
                            false,
                            true,
                            o,
                            pix,
                            ckk,
                            S::one(),
                            &g[n * o * pix..(n + 1) * o * pix],
                            col,
                            S::one(),
                            &mut dw,
                        );
                    }
                    self.send(grads, *w, dw);
                }
                if let Some(bv) = bias {
                    if self.requires_grad(*bv) {
                        let mut db = vec![S::zero(); o];
                        for n in 0..b {
                            for (oc, d) in db.iter_mut().enumerate() {
                                let base = (n * o + oc) * pix;
                                *d = *d + g[base..base + pix].iter().copied().sum::<S>();
                            }
                        }
                        self.send(grads, *bv, db);
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![S::zero(); b * c * h * wd];
                    let mut dcols = vec![S::zero(); ckk * pix];
                    for n in 0..b {
                        gemm(
                            true,
                            false,
                            ckk,
                            o,
                            pix,
                            S::one(),
                            wt,
                            &g[n * o * pix..(n + 1) * o * pix],
                            S::zero(),
                            &mut dcols,
                        );
                        col2im(
                            &dcols,
                            &mut dx[n * c * h * wd..(n + 1) * c * h * wd],
                            c,
                            h,
                            wd,
                            k,
                            *stride,
                            *pad,
                            oh,
                            ow,
                        );
                    }
                    self.send(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, c, h, w) = shape4("batch_norm", self.shape(*x))?;
                let hw = h * w;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for n in 0..b {
                    for ch in 0..c {
                        let base = (n * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + g[i];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![S::zero(); g.len()];
                    let count = S::from_usize(b * hw).unwrap();
                    for ch in 0..c {
                        let scale = gm[ch] * inv_std[ch];
                        for n in 0..b {
                            let base = (n * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] = if *batch_stats {
                                    scale
                                        * (g[i]
                                            - dbeta[ch] / count
                                            - xhat[i] * dgamma[ch] / count)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    self.send(grads, *x, dx);
                }
                self.send(grads, *gamma, dgamma);
                self.send(grads, *beta, dbeta);
            }
            Op::MeanPool2(x) => {
                let (b, c, h, w) = shape4("meanpool2x2", self.shape(*x))?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = S::from_f64_lossy(0.25);
                let mut dx = vec![S::zero(); b * c * h * w];
                for m in 0..b * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(m * oh + oy) * ow + ox] * quarter;
                            let i = m * h * w + 2 * oy * w + 2 * ox;
                            dx[i] = gv;
                            dx[i + 1] = gv;
                            dx[i + w] = gv;
                            dx[i + w + 1] = gv;
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let (b, c, h, w) = shape4("global_avg_pool", self.shape(*x))?;
                let hw = h * w;
                let scale = S::one() / S::from_usize(hw).unwrap();
                let mut dx = vec![S::zero(); b * c * hw];
                for m in 0..b * c {
                    let v = g[m] * scale;
                    dx[m * hw..(m + 1) * hw].iter_mut().for_each(|d| *d = v);
                }
                self.send(grads, *x, dx);
            }
            Op::PadTail(x) => {
                let (b, d) = shape2("pad_tail", self.shape(*x))?;
                let width = node.value.shape()[1];
                let mut dx = Vec::with_capacity(b * d);
                for r in 0..b {
                    dx.extend_from_slice(&g[r * width..r * width + d]);
                }
                self.send(grads, *x, dx);
            }
            Op::ConcatCols(a, c) => {
                let (rows, p) = shape2("concat_cols", self.shape(*a))?;
                let q = self.shape(*c)[1];
                let mut da = Vec::with_capacity(rows * p);
                let mut dc = Vec::with_capacity(rows * q);
                for r in 0..rows {
                    let row = &g[r * (p + q)..(r + 1) * (p + q)];
                    da.extend_from_slice(&row[..p]);
                    dc.extend_from_slice(&row[p..]);
                }
                self.send(grads, *a, da);
                self.send(grads, *c, dc);
            }
            Op::ShortcutPad { x, stride } => {
                let (b, c, h, w) = shape4("shortcut_pad", self.shape(*x))?;
                let (_, out_maps, oh, ow) = shape4("shortcut_pad", node.value.shape())?;
                let mut dx = vec![S::zero(); b * c * h * w];
                for n in 0..b {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                dx[((n * c + ch) * h + oy * stride) * w + ox * stride] =
                                    g[((n * out_maps + ch) * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::BroadcastRows(v) => {
                let d = self.value(*v).len();
                let mut dv = vec![S::zero(); d];
                for (i, &gi) in g.iter().enumerate() {
                    dv[i % d] = dv[i % d] + gi;
                }
                self.send(grads, *v, dv);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / S::from_usize(labels.len()).unwrap();
                let mut dl: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * k + l] = dl[r * k + l] - scale;
                }
                self.send(grads, *logits, dl);
            }
        }
        Ok(())
    }
}
