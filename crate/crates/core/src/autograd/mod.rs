//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in creation order, so parents always
//! precede children and the reverse of the tape is a valid topological
//! order. Leaf gradients persist across [`Graph::backward`] calls and
//! accumulate until [`Graph::zero_grad`].

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::mmd::Kernel;
use crate::tensor::{ParamId, ParamStore, Tensor};
use kernels::{
    axis_split, col2im_batch, from_channel_major, gemm, im2col_batch, sigmoid, softplus, to_channel_major, ConvGeom,
};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn leaky_relu(slope: f64) -> Result<Self> {
        if slope > 0.0 && slope < 1.0 {
            Ok(Activation::LeakyRelu(slope))
        } else {
            Err(Error::InvalidArgument(format!("leaky relu slope {slope} outside (0,1)")))
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Per-channel batch statistics computed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    AddBias { x: Var, bias: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
    Act { x: Var, kind: Activation },
    Gap(Var),
    AvgPool2(Var),
    PadChannels(Var),
    LogSumExp { x: Var, axis: usize },
    Softplus(Var),
    Abs(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Gram { x: Var, y: Var, kernel: Kernel },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn nchw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected NCHW input, got {s:?}"))),
    }
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
        self.nodes.push(Node { value, grad: None, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter as a leaf. When `trainable` is false (or the
    /// parameter itself is frozen) the leaf behaves as a constant.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        let p = store.get(id);
        let rg = trainable && p.trainable;
        let v = self.push(p.value.clone(), Op::Leaf, rg);
        self.nodes[v.0].param = Some((store.store_id(), id));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Accumulated gradients of parameter leaves as `(store id, param, grad)`.
    pub fn param_grads(&self) -> impl Iterator<Item = (u64, ParamId, &Tensor)> {
        self.nodes.iter().filter_map(|n| match (n.param, &n.grad) {
            (Some((s, id)), Some(g)) => Some((s, id, g)),
            _ => None,
        })
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Elementwise product with a constant tensor (dropout masks, one-hots).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let vx = self.value(x);
        check_same("mul_const", vx, &c)?;
        let data = vx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst(x, c), rg))
    }

    /// Adds `bias[c]` along axis 1 of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let vb = self.value(bias);
        if vx.ndim() < 2 || vb.shape() != [vx.dim(1)] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", vx.shape(), vb.shape())));
        }
        let (outer, c, inner) = axis_split(vx.shape(), 1);
        let mut t = vx.clone();
        let d = t.data_mut();
        for o in 0..outer {
            for ch in 0..c {
                let b = vb.data()[ch];
                for v in &mut d[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                    *v += b;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x).map(|v| kind.apply(v));
        let rg = self.rg(x);
        self.push(t, Op::Act { x, kind }, rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        let rg = self.rg(x);
        self.push(t, Op::Softplus(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(t, Op::Abs(x), rg)
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let [r, c] = *vx.shape() else {
            return Err(Error::shape("transpose", format!("expected 2-D, got {:?}", vx.shape())));
        };
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = vx.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let ([m, k], [k2, n]) = (va.shape(), vb.shape()) else {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        };
        let (m, k, k2, n) = (*m, *k, *k2, *n);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for {:?}", vx.shape())));
        }
        let (outer, n, inner) = axis_split(vx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += vx.data()[(o * n + a) * inner + i];
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SumAxis { x, axis }, rg))
    }

    /// Numerically stable `ln Σ exp` along `axis` (max-shifted).
    pub fn log_sum_exp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() || vx.dim(axis) == 0 {
            return Err(Error::shape("log_sum_exp", format!("axis {axis} for {:?}", vx.shape())));
        }
        let out = lse_values(vx, axis);
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSumExp { x, axis }, rg))
    }

    // ---- convolution ----------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, c, h, wd) = nchw("conv2d", vx)?;
        let (o, ci, k, k2) = nchw("conv2d weight", vw)?;
        if ci != c || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} incompatible with weight {:?}", vx.shape(), vw.shape()),
            ));
        }
        let g = ConvGeom::new(c, h, wd, k, stride, pad).ok_or_else(|| {
            Error::shape("conv2d", format!("kernel {k} stride {stride} pad {pad} does not fit {h}x{wd}"))
        })?;
        let (rows, ncols) = (g.col_rows(), g.col_cols());
        let plane = c * h * wd;
        let mut out = Vec::with_capacity(n * o * ncols);
        for (b0, b1) in chunks(n, ncols) {
            let m = b1 - b0;
            let cols = im2col_batch(&vx.data()[b0 * plane..b1 * plane], m, &g);
            let mut y = vec![0.0; o * m * ncols];
            gemm(o, rows, m * ncols, vw.data(), false, &cols, false, &mut y, 0.0);
            out.extend(from_channel_major(&y, m, o, ncols));
        }
        let t = Tensor::new(vec![n, o, g.out_h, g.out_w], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Conv2d { x, w, stride, pad }, rg))
    }

    /// Transposed convolution, the linear adjoint of [`Graph::conv2d`] with the
    /// same `[in, out, k, k]` weight. Output extent is
    /// `(H − 1)·stride + K − 2·pad + (stride − 1)`, so "same" padding with
    /// stride 2 exactly doubles the spatial extent.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, ci, h, wd) = nchw("conv_transpose2d", vx)?;
        let (wi, co, k, k2) = nchw("conv_transpose2d weight", vw)?;
        if wi != ci || k != k2 || stride == 0 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {:?} incompatible with weight {:?}", vx.shape(), vw.shape()),
            ));
        }
        let g = transpose_geom(co, h, wd, k, stride, pad).ok_or_else(|| {
            Error::shape("conv_transpose2d", format!("kernel {k} stride {stride} pad {pad} on {h}x{wd}"))
        })?;
        let (rows, ncols) = (g.col_rows(), g.col_cols());
        let mut out = Vec::with_capacity(n * co * g.in_h * g.in_w);
        for (b0, b1) in chunks(n, ncols) {
            let m = b1 - b0;
            let x_cm = to_channel_major(&vx.data()[b0 * ci * ncols..b1 * ci * ncols], m, ci, ncols);
            let mut cols = vec![0.0; rows * m * ncols];
            gemm(rows, ci, m * ncols, vw.data(), true, &x_cm, false, &mut cols, 0.0);
            out.extend(col2im_batch(&cols, m, &g));
        }
        let t = Tensor::new(vec![n, co, g.in_h, g.in_w], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, stride, pad }, rg))
    }

    // ---- normalization & pooling ---------------------------------------

    /// Batch normalization over all axes except 1. With `running = None`
    /// batch statistics are used and returned; otherwise the supplied
    /// `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let vx = self.value(x);
        if vx.ndim() < 2 {
            return Err(Error::shape("batch_norm", format!("input {:?}", vx.shape())));
        }
        let (outer, c, inner) = axis_split(vx.shape(), 1);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("batch_norm", format!("gamma/beta length must be {c}")));
        }
        let count = (outer * inner) as f64;
        if count == 0.0 {
            return Err(Error::Empty("batch"));
        }
        let (mean, var, batch) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length mismatch"));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let s = &vx.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        mean[ch] += s.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for o in 0..outer {
                    for ch in 0..c {
                        let s = &vx.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        var[ch] += s.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vx.clone();
        let mut y = vx.clone();
        for o in 0..outer {
            for ch in 0..c {
                let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                for (xh, yy) in xhat.data_mut()[r.clone()].iter_mut().zip(&mut y.data_mut()[r]) {
                    *xh = (*xh - mean[ch]) * inv_std[ch];
                    *yy = g[ch] * *xh + bt[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: batch }, rg);
        Ok((v, batch.then_some(BatchStats { mean, var })))
    }

    /// Global average pooling: NCHW → NC.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = nchw("global_avg_pool", vx)?;
        if h == 0 || w == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let hw = h * w;
        let data = vx.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let t = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gap(x), rg))
    }

    /// Uniform 2×2 average pooling with stride 2 on even extents.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = nchw("avg_pool2", vx)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("odd spatial extent {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for (p, plane) in vx.data().chunks(h * w).enumerate() {
            for i in 0..oh {
                for j in 0..ow {
                    let s = plane[2 * i * w + 2 * j]
                        + plane[2 * i * w + 2 * j + 1]
                        + plane[(2 * i + 1) * w + 2 * j]
                        + plane[(2 * i + 1) * w + 2 * j + 1];
                    out[p * oh * ow + i * ow + j] = 0.25 * s;
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::AvgPool2(x), rg))
    }

    /// Appends zero channels so that axis 1 has extent `channels`.
    pub fn pad_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = nchw("pad_channels", vx)?;
        if channels < c {
            return Err(Error::shape("pad_channels", format!("cannot shrink {c} to {channels}")));
        }
        let mut out = vec![0.0; n * channels * h * w];
        for b in 0..n {
            out[b * channels * h * w..(b * channels + c) * h * w]
                .copy_from_slice(&vx.data()[b * c * h * w..(b + 1) * c * h * w]);
        }
        let t = Tensor::new(vec![n, channels, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::PadChannels(x), rg))
    }

    /// Pairwise kernel matrix `K[i][j] = k(x_i, y_j)` for row batches.
    pub fn gram(&mut self, x: Var, y: Var, kernel: Kernel) -> Result<Var> {
        let (vx, vy) = (self.value(x), self.value(y));
        let ([m, d], [n, d2]) = (vx.shape(), vy.shape()) else {
            return Err(Error::shape("gram", format!("{:?} vs {:?}", vx.shape(), vy.shape())));
        };
        if d != d2 {
            return Err(Error::shape("gram", format!("feature dims {d} and {d2} differ")));
        }
        let (m, n) = (*m, *n);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = kernel.eval_unchecked(vx.row(i), vy.row(j));
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(t, Op::Gram { x, y, kernel }, rg))
    }

    // ---- backward -------------------------------------------------------

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.nodes[i].grad;
                match slot {
                    Some(g) => g.add_assign(&gout),
                    None => *slot = Some(gout),
                }
                continue;
            }
            for (parent, g) in self.local_grads(i, &gout) {
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, gout: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(2);
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    out.push((*a, gout.clone()));
                }
                if want(*b) {
                    out.push((*b, gout.clone()));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    out.push((*a, gout.clone()));
                }
                if want(*b) {
                    out.push((*b, gout.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    out.push((*a, zip_map(gout, val(*b), |g, y| g * y)));
                }
                if want(*b) {
                    out.push((*b, zip_map(gout, val(*a), |g, x| g * x)));
                }
            }
            Op::Scale(x, c) => out.push((*x, gout.map(|g| g * c))),
            Op::MulConst(x, c) => out.push((*x, zip_map(gout, c, |g, m| g * m))),
            Op::AddBias { x, bias } => {
                if want(*x) {
                    out.push((*x, gout.clone()));
                }
                if want(*bias) {
                    let (outer, c, inner) = axis_split(gout.shape(), 1);
                    let mut gb = vec![0.0; c];
                    for o in 0..outer {
                        for (ch, acc) in gb.iter_mut().enumerate() {
                            *acc += gout.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner].iter().sum::<f64>();
                        }
                    }
                    out.push((*bias, Tensor::from_vec(gb)));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                if want(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gout.data(), false, vb.data(), true, &mut ga, 0.0);
                    out.push((*a, tensor(va.shape(), ga)));
                }
                if want(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, gout.data(), false, &mut gb, 0.0);
                    out.push((*b, tensor(vb.shape(), gb)));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (gout.dim(0), gout.dim(1));
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[j * r + i] = gout.data()[i * c + j];
                    }
                }
                out.push((*x, tensor(&[c, r], g)));
            }
            Op::Reshape(x) => out.push((*x, gout.clone().reshape(val(*x).shape()).expect("same size"))),
            Op::Conv2d { x, w, stride, pad } => {
                let (vx, vw) = (val(*x), val(*w));
                let (n, c, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
                let (o, k) = (vw.dim(0), vw.dim(2));
                let g = ConvGeom::new(c, h, wd, k, *stride, *pad).expect("validated in forward");
                let (rows, ncols) = (g.col_rows(), g.col_cols());
                let plane = c * h * wd;
                let mut gw = want(*w).then(|| vec![0.0; vw.len()]);
                let mut gx = want(*x).then(|| Vec::with_capacity(vx.len()));
                for (b0, b1) in chunks(n, ncols) {
                    let m = b1 - b0;
                    let go = to_channel_major(&gout.data()[b0 * o * ncols..b1 * o * ncols], m, o, ncols);
                    if let Some(gw) = gw.as_mut() {
                        let cols = im2col_batch(&vx.data()[b0 * plane..b1 * plane], m, &g);
                        gemm(o, m * ncols, rows, &go, false, &cols, true, gw, 1.0);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut cols = vec![0.0; rows * m * ncols];
                        gemm(rows, o, m * ncols, vw.data(), true, &go, false, &mut cols, 0.0);
                        gx.extend(col2im_batch(&cols, m, &g));
                    }
                }
                if let Some(gw) = gw {
                    out.push((*w, tensor(vw.shape(), gw)));
                }
                if let Some(gx) = gx {
                    out.push((*x, tensor(vx.shape(), gx)));
                }
            }
            Op::ConvTranspose2d { x, w, stride, pad } => {
                let (vx, vw) = (val(*x), val(*w));
                let (n, ci, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
                let (co, k) = (vw.dim(1), vw.dim(2));
                let g = transpose_geom(co, h, wd, k, *stride, *pad).expect("validated in forward");
                let (rows, ncols) = (g.col_rows(), g.col_cols());
                let plane = co * g.in_h * g.in_w;
                let mut gw = want(*w).then(|| vec![0.0; vw.len()]);
                let mut gx = want(*x).then(|| Vec::with_capacity(vx.len()));
                for (b0, b1) in chunks(n, ncols) {
                    let m = b1 - b0;
                    let cols = im2col_batch(&gout.data()[b0 * plane..b1 * plane], m, &g);
                    if let Some(gw) = gw.as_mut() {
                        let x_cm = to_channel_major(&vx.data()[b0 * ci * ncols..b1 * ci * ncols], m, ci, ncols);
                        gemm(ci, m * ncols, rows, &x_cm, false, &cols, true, gw, 1.0);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut y = vec![0.0; ci * m * ncols];
                        gemm(ci, rows, m * ncols, vw.data(), false, &cols, false, &mut y, 0.0);
                        gx.extend(from_channel_major(&y, m, ci, ncols));
                    }
                }
                if let Some(gw) = gw {
                    out.push((*w, tensor(vw.shape(), gw)));
                }
                if let Some(gx) = gx {
                    out.push((*x, tensor(vx.shape(), gx)));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (outer, c, inner) = axis_split(gout.shape(), 1);
                let gm = val(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                        for (dy, xh) in gout.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                            sum_dy[ch] += dy;
                            sum_dy_xhat[ch] += dy * xh;
                        }
                    }
                }
                if want(*x) {
                    let count = (outer * inner) as f64;
                    let mut gx = gout.clone();
                    for o in 0..outer {
                        for ch in 0..c {
                            let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                            let scale = gm[ch] * inv_std[ch];
                            for (g, xh) in gx.data_mut()[r.clone()].iter_mut().zip(&xhat.data()[r]) {
                                *g = if *batch_stats {
                                    scale * (*g - sum_dy[ch] / count - xh * sum_dy_xhat[ch] / count)
                                } else {
                                    scale * *g
                                };
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if want(*gamma) {
                    out.push((*gamma, Tensor::from_vec(sum_dy_xhat)));
                }
                if want(*beta) {
                    out.push((*beta, Tensor::from_vec(sum_dy)));
                }
            }
            Op::Act { x, kind } => {
                let g = zip3_map(gout, val(*x), &node.value, |g, xi, yi| g * kind.derivative(xi, yi));
                out.push((*x, g));
            }
            Op::Gap(x) => {
                let vx = val(*x);
                let hw = vx.dim(2) * vx.dim(3);
                let mut g = Vec::with_capacity(vx.len());
                for &go in gout.data() {
                    g.extend(std::iter::repeat_n(go / hw as f64, hw));
                }
                out.push((*x, tensor(vx.shape(), g)));
            }
            Op::AvgPool2(x) => {
                let vx = val(*x);
                let (h, w) = (vx.dim(2), vx.dim(3));
                let (oh, ow) = (h / 2, w / 2);
                let mut g = vec![0.0; vx.len()];
                for (p, plane) in g.chunks_mut(h * w).enumerate() {
                    for i in 0..h {
                        for j in 0..w {
                            plane[i * w + j] = 0.25 * gout.data()[p * oh * ow + (i / 2) * ow + j / 2];
                        }
                    }
                }
                out.push((*x, tensor(vx.shape(), g)));
            }
            Op::PadChannels(x) => {
                let vx = val(*x);
                let (n, c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
                let cp = gout.dim(1);
                let mut g = Vec::with_capacity(vx.len());
                for b in 0..n {
                    g.extend_from_slice(&gout.data()[b * cp * h * w..(b * cp + c) * h * w]);
                }
                out.push((*x, tensor(vx.shape(), g)));
            }
            Op::LogSumExp { x, axis } => {
                let vx = val(*x);
                let (outer, n, inner) = axis_split(vx.shape(), *axis);
                let mut g = vec![0.0; vx.len()];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            let idx = (o * n + a) * inner + i;
                            let r = o * inner + i;
                            g[idx] = gout.data()[r] * (vx.data()[idx] - node.value.data()[r]).exp();
                        }
                    }
                }
                out.push((*x, tensor(vx.shape(), g)));
            }
            Op::Softplus(x) => out.push((*x, zip_map(gout, val(*x), |g, v| g * sigmoid(v)))),
            Op::Abs(x) => out.push((*x, zip_map(gout, val(*x), |g, v| if v > 0.0 { g } else if v < 0.0 { -g } else { 0.0 }))),
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), gout.item()))),
            Op::SumAxis { x, axis } => {
                let vx = val(*x);
                let (outer, n, inner) = axis_split(vx.shape(), *axis);
                let mut g = vec![0.0; vx.len()];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            g[(o * n + a) * inner + i] = gout.data()[o * inner + i];
                        }
                    }
                }
                out.push((*x, tensor(vx.shape(), g)));
            }
            Op::Gram { x, y, kernel } => {
                let (vx, vy) = (val(*x), val(*y));
                let (m, n, d) = (vx.dim(0), vy.dim(0), vx.dim(1));
                match kernel {
                    Kernel::InnerProduct => {
                        if want(*x) {
                            let mut gx = vec![0.0; m * d];
                            gemm(m, n, d, gout.data(), false, vy.data(), false, &mut gx, 0.0);
                            out.push((*x, tensor(vx.shape(), gx)));
                        }
                        if want(*y) {
                            let mut gy = vec![0.0; n * d];
                            gemm(n, m, d, gout.data(), true, vx.data(), false, &mut gy, 0.0);
                            out.push((*y, tensor(vy.shape(), gy)));
                        }
                    }
                    Kernel::Gaussian { sigma } => {
                        let inv = 1.0 / (sigma * sigma);
                        let mut gx = vec![0.0; m * d];
                        let mut gy = vec![0.0; n * d];
                        for i in 0..m {
                            for j in 0..n {
                                let coef = gout.data()[i * n + j] * node.value.data()[i * n + j] * inv;
                                for f in 0..d {
                                    let diff = vx.data()[i * d + f] - vy.data()[j * d + f];
                                    gx[i * d + f] -= coef * diff;
                                    gy[j * d + f] += coef * diff;
                                }
                            }
                        }
                        if want(*x) {
                            out.push((*x, tensor(vx.shape(), gx)));
                        }
                        if want(*y) {
                            out.push((*y, tensor(vy.shape(), gy)));
                        }
                    }
                }
            }
        }
        out
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("gradient shape matches value")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    tensor(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
}

fn zip3_map(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).zip(c.data()).map(|((x, y), z)| f(*x, *y, *z)).collect();
    tensor(a.shape(), data)
}

fn transpose_geom(out_c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<ConvGeom> {
    let oh = ((h - 1) * stride + k + stride - 1).checked_sub(2 * pad)?;
    let ow = ((w - 1) * stride + k + stride - 1).checked_sub(2 * pad)?;
    let g = ConvGeom::new(out_c, oh, ow, k, stride, pad)?;
    (g.out_h == h && g.out_w == w).then_some(g)
}

/// Max-shifted log-sum-exp of a plain tensor along `axis`.
/// Image ranges processed per GEMM, sized so the unfolded block stays
/// around a thousand columns wide.
fn chunks(n: usize, ncols: usize) -> impl Iterator<Item = (usize, usize)> {
    let per = (1024 / ncols.max(1)).max(1);
    (0..n).step_by(per).map(move |b| (b, (b + per).min(n)))
}

pub fn lse_values(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| x.data()[(o * n + a) * inner + i];
            let mx = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
            out[o * inner + i] = if mx.is_infinite() {
                mx
            } else {
                mx + (0..n).map(|a| (at(a) - mx).exp()).sum::<f64>().ln()
            };
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    tensor(&shape, out)
}
