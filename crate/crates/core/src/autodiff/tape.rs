//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its output value plus whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in exact
//! reverse order and accumulates (`+=`) into each input's gradient buffer.

use crate::autodiff::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-channel batch mean and variance, for the running statistics.
pub type BatchStats<T> = (Vec<T>, Vec<T>);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length; odd kernels are centered.
    Same,
    /// Output at `t` reads inputs at `t, t-d, t-2d, ...` only.
    Causal,
}

const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        padding: Padding,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    /// Shared by training and inference normalization; only `x`'s gradient differs.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Sum(Var),
    Mean(Var),
    /// Fused loss whose input gradient was computed during the forward pass.
    Fused(Var, Vec<T>),
}

/// Record of executed operations. Confined to one thread of execution.
pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    ops: Vec<Op<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn req(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.requires[v.0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let r = self.req(&[a, b]);
        self.push(out, op, r)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.values[a.0].map(f);
        let r = self.req(&[a]);
        self.push(out, op, r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// Elementwise product with a non-differentiable mask (dropout, zoneout).
    pub fn mul_const(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.values[a.0].numel() {
            return Err(Error::shape("mul_const", self.shape(a), &[mask.len()]));
        }
        let va = &self.values[a.0];
        let data = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let r = self.req(&[a]);
        Ok(self.push(out, Op::MulConst(a, mask), r))
    }

    /// Adds a bias of `cols` elements to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let vx = &self.values[x.0];
        let vb = &self.values[b.0];
        let cols = vx.cols();
        if vb.numel() != cols {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let r = self.req(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), r))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(va.data(), vb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        let r = self.req(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), r))
    }

    /// `x·W + b` with `W` shaped `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| {
            if x > T::zero() {
                x
            } else {
                x * slope
            }
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), T::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), Scalar::sigmoid)
    }

    /// Softmax of a rank-2 tensor along `axis` (0 = down columns, 1 = across rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = &self.values[a.0];
        if va.shape().len() != 2 || axis > 1 {
            return Err(Error::Invalid(format!(
                "softmax needs a rank-2 tensor and axis 0 or 1, got {:?} axis {axis}",
                va.shape()
            )));
        }
        let (rows, cols) = (va.shape()[0], va.shape()[1]);
        let mut out = va.data().to_vec();
        let (outer, inner, stride_o, stride_i) = if axis == 1 {
            (rows, cols, cols, 1)
        } else {
            (cols, rows, 1, cols)
        };
        for o in 0..outer {
            let idx = |i: usize| o * stride_o + i * stride_i;
            let mx = (0..inner)
                .map(|i| out[idx(i)])
                .fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for i in 0..inner {
                let e = (out[idx(i)] - mx).exp();
                out[idx(i)] = e;
                s += e;
            }
            for i in 0..inner {
                out[idx(i)] /= s;
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let r = self.req(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), r))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.values[parts[0].0].rows();
        for &p in parts {
            if self.values[p.0].rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
        }
        let total: usize = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.values[p.0].row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rq = self.req(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rq))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.values[parts[0].0].cols();
        for &p in parts {
            if self.values[p.0].cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
        }
        let rows: usize = parts.iter().map(|p| self.values[p.0].rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.values[p.0].data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rq = self.req(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rq))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = &self.values[a.0];
        let (rows, cols) = (va.rows(), va.cols());
        if start + len > cols {
            return Err(Error::shape("slice_cols", va.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rq = self.req(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rq))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = &self.values[a.0];
        let (rows, cols) = (va.rows(), va.cols());
        if start + len > rows {
            return Err(Error::shape("slice_rows", va.shape(), &[start, len]));
        }
        let data = va.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(vec![len, cols], data)?;
        let rq = self.req(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rq))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.values[a.0].transpose2();
        let rq = self.req(&[a]);
        self.push(out, Op::Transpose(a), rq)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[a.0].clone().reshape(shape)?;
        let rq = self.req(&[a]);
        Ok(self.push(out, Op::Reshape(a), rq))
    }

    /// 1-D convolution over time. `x` is `[T, Cin]`, `w` is `[K, Cin, Cout]`,
    /// output is `[T, Cout]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        padding: Padding,
    ) -> Result<Var> {
        let vx = &self.values[x.0];
        let vw = &self.values[w.0];
        let ws = vw.shape();
        if ws.len() != 3 || vx.shape().len() != 2 || vx.shape()[1] != ws[1] || dilation == 0 {
            return Err(Error::shape("conv1d", vx.shape(), ws));
        }
        let (k, cin, cout) = (ws[0], ws[1], ws[2]);
        if padding == Padding::Same && k % 2 == 0 {
            return Err(Error::Invalid(format!(
                "same-padded conv1d needs an odd kernel, got {k}"
            )));
        }
        let t = vx.shape()[0];
        let mut out = vec![T::zero(); t * cout];
        for tap in 0..k {
            let off = tap_offset(tap, k, dilation, padding);
            let wk = &vw.data()[tap * cin * cout..(tap + 1) * cin * cout];
            let (lo, hi) = valid_range(t, off);
            if lo < hi {
                let src = (lo as isize + off) as usize;
                gemm_acc(
                    &vx.data()[src * cin..(src + hi - lo) * cin],
                    wk,
                    &mut out[lo * cout..hi * cout],
                    hi - lo,
                    cin,
                    cout,
                );
            }
        }
        if let Some(b) = b {
            let vb = &self.values[b.0];
            if vb.numel() != cout {
                return Err(Error::shape("conv1d bias", ws, vb.shape()));
            }
            for row in out.chunks_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(vb.data()) {
                    *o += bv;
                }
            }
        }
        let out = Tensor::new(vec![t, cout], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rq = self.req(&ins);
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                dilation,
                padding,
            },
            rq,
        ))
    }

    /// Transposed convolution with kernel `[K, Cin, Cout]` and the given stride;
    /// input `[T, Cin]` produces `[T·stride, Cout]` (trailing overlap is cropped).
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let vx = &self.values[x.0];
        let vw = &self.values[w.0];
        let ws = vw.shape();
        if ws.len() != 3 || vx.shape().len() != 2 || vx.shape()[1] != ws[1] || stride == 0 {
            return Err(Error::shape("conv_transpose1d", vx.shape(), ws));
        }
        let (k, cin, cout) = (ws[0], ws[1], ws[2]);
        let t = vx.shape()[0];
        let len = t * stride;
        let mut out = vec![T::zero(); len * cout];
        for i in 0..t {
            let xi = vx.row(i);
            for tap in 0..k {
                let o = i * stride + tap;
                if o >= len {
                    break;
                }
                let wk = &vw.data()[tap * cin * cout..(tap + 1) * cin * cout];
                gemm_acc(xi, wk, &mut out[o * cout..(o + 1) * cout], 1, cin, cout);
            }
        }
        if let Some(b) = b {
            let vb = &self.values[b.0];
            if vb.numel() != cout {
                return Err(Error::shape("conv_transpose1d bias", ws, vb.shape()));
            }
            for row in out.chunks_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(vb.data()) {
                    *o += bv;
                }
            }
        }
        let out = Tensor::new(vec![len, cout], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rq = self.req(&ins);
        Ok(self.push(out, Op::ConvTranspose1d { x, w, b, stride }, rq))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = &self.values[table.0];
        let (v, d) = (vt.rows(), vt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Invalid(format!(
                "embedding id {bad} out of range for vocab {v}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(vt.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rq = self.req(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rq,
        ))
    }

    /// Per-channel normalization of `x: [T, C]`.
    ///
    /// With `running = None` the batch statistics are used and returned as
    /// `(mean, biased variance)` so the caller can update its running buffers.
    /// With `running = Some((mean, var))` those statistics are used instead.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let vx = &self.values[x.0];
        let (t, c) = (vx.rows(), vx.cols());
        if self.values[gamma.0].numel() != c || self.values[beta.0].numel() != c {
            return Err(Error::shape("batch_norm", vx.shape(), self.shape(gamma)));
        }
        let eps = T::lit(BN_EPS);
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape(
                        "batch_norm running stats",
                        vx.shape(),
                        &[m.len()],
                    ));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let n = T::from_usize_lossy(t.max(1));
                for r in 0..t {
                    for (m, &xv) in mean.iter_mut().zip(vx.row(r)) {
                        *m += xv;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for r in 0..t {
                    for ((s, &xv), &m) in var.iter_mut().zip(vx.row(r)).zip(&mean) {
                        *s += (xv - m) * (xv - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n);
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.values[gamma.0].data();
        let bb = self.values[beta.0].data();
        let mut xhat = Vec::with_capacity(t * c);
        let mut out = Vec::with_capacity(t * c);
        for r in 0..t {
            for (j, &xv) in vx.row(r).iter().enumerate() {
                let h = (xv - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + bb[j]);
            }
        }
        let out = Tensor::new(vec![t, c], out)?;
        let rq = self.req(&[x, gamma, beta]);
        let var_out = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rq,
        );
        Ok((var_out, batch_stats.then_some((mean, var))))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().copied().sum();
        let rq = self.req(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rq)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_usize_lossy(v.numel().max(1));
        let rq = self.req(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rq)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let vp = &self.values[pred.0];
        if vp.numel() != target.len() {
            return Err(Error::shape("mse", vp.shape(), &[target.len()]));
        }
        let n = T::from_usize_lossy(target.len().max(1));
        let mut loss = T::zero();
        let mut grad = Vec::with_capacity(target.len());
        for (&p, &t) in vp.data().iter().zip(target) {
            let d = p - t;
            loss += d * d;
            grad.push((d + d) / n);
        }
        Ok(self.fused(pred, loss / n, grad))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        let vl = &self.values[logits.0];
        if vl.numel() != target.len() {
            return Err(Error::shape("bce_with_logits", vl.shape(), &[target.len()]));
        }
        let n = T::from_usize_lossy(target.len().max(1));
        let mut loss = T::zero();
        let mut grad = Vec::with_capacity(target.len());
        for (&z, &y) in vl.data().iter().zip(target) {
            // -[y ln σ(z) + (1-y) ln σ(-z)]
            loss += -(y * z.log_sigmoid() + (T::one() - y) * (-z).log_sigmoid());
            grad.push((z.sigmoid() - y) / n);
        }
        Ok(self.fused(logits, loss / n, grad))
    }

    /// Appends a scalar node whose gradient w.r.t. `input` is `grad`.
    pub fn fused(&mut self, input: Var, value: T, grad: Vec<T>) -> Var {
        debug_assert_eq!(grad.len(), self.values[input.0].numel());
        let rq = self.req(&[input]);
        self.push(Tensor::scalar(value), Op::Fused(input, grad), rq)
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across calls;
    /// intermediate gradients are recomputed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for i in 0..self.ops.len() {
            if !matches!(self.ops[i], Op::Leaf) {
                self.grads[i] = None;
            }
        }
        self.grads[loss.0].get_or_insert_with(|| vec![T::zero()])[0] += T::one();
        for i in (0..=loss.0).rev() {
            if !self.requires[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            self.backprop(i, &op, &g);
            self.ops[i] = op;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop(&mut self, node: usize, op: &Op<T>, g: &[T]) {
        let values = &self.values;
        let requires = &self.requires;
        let mut gs = GradSink {
            values,
            requires,
            grads: &mut self.grads,
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                gs.acc_slice(a, g);
                gs.acc_slice(b, g);
            }
            Op::Sub(a, b) => {
                gs.acc_slice(a, g);
                gs.acc_grad(b, |gb| {
                    for (o, &s) in gb.iter_mut().zip(g) {
                        *o -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let va = values[a.0].data().to_vec();
                let vb = values[b.0].data().to_vec();
                gs.acc_grad(a, |ga| {
                    for ((o, &s), &y) in ga.iter_mut().zip(g).zip(&vb) {
                        *o += s * y;
                    }
                });
                gs.acc_grad(b, |gb| {
                    for ((o, &s), &x) in gb.iter_mut().zip(g).zip(&va) {
                        *o += s * x;
                    }
                });
            }
            Op::Scale(a, c) => gs.acc_grad(a, |ga| {
                for (o, &s) in ga.iter_mut().zip(g) {
                    *o += s * c;
                }
            }),
            Op::MulConst(a, ref m) => gs.acc_grad(a, |ga| {
                for ((o, &s), &mv) in ga.iter_mut().zip(g).zip(m) {
                    *o += s * mv;
                }
            }),
            Op::AddBias(x, b) => {
                gs.acc_slice(x, g);
                let cols = values[b.0].numel();
                gs.acc_grad(b, |gb| {
                    for row in g.chunks(cols) {
                        for (o, &s) in gb.iter_mut().zip(row) {
                            *o += s;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                let n = values[b.0].shape()[1];
                if requires[a.0] {
                    let vb = &values[b.0];
                    gs.acc_grad(a, |ga| gemm_nt_acc(g, vb.data(), ga, m, k, n));
                }
                if requires[b.0] {
                    let va = &values[a.0];
                    gs.acc_grad(b, |gb| gemm_tn_acc(va.data(), g, gb, m, k, n));
                }
            }
            Op::Relu(a) => {
                let y = &values[node];
                gs.acc_grad(a, |ga| {
                    for ((o, &s), &yv) in ga.iter_mut().zip(g).zip(y.data()) {
                        if yv > T::zero() {
                            *o += s;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = &values[a.0];
                gs.acc_grad(a, |ga| {
                    for ((o, &s), &xv) in ga.iter_mut().zip(g).zip(x.data()) {
                        *o += if xv > T::zero() { s } else { s * slope };
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &values[node];
                gs.acc_grad(a, |ga| {
                    for ((o, &s), &yv) in ga.iter_mut().zip(g).zip(y.data()) {
                        *o += s * (T::one() - yv * yv);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &values[node];
                gs.acc_grad(a, |ga| {
                    for ((o, &s), &yv) in ga.iter_mut().zip(g).zip(y.data()) {
                        *o += s * yv * (T::one() - yv);
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let y = &values[node];
                let (rows, cols) = (y.shape()[0], y.shape()[1]);
                let (outer, inner, so, si) = if axis == 1 {
                    (rows, cols, cols, 1)
                } else {
                    (cols, rows, 1, cols)
                };
                gs.acc_grad(a, |ga| {
                    for o in 0..outer {
                        let idx = |i: usize| o * so + i * si;
                        let dot: T = (0..inner).map(|i| g[idx(i)] * y.data()[idx(i)]).sum();
                        for i in 0..inner {
                            ga[idx(i)] += y.data()[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(ref parts) => {
                let total = values[node].cols();
                let rows = values[node].rows();
                let mut off = 0;
                for &p in parts {
                    let c = values[p.0].cols();
                    gs.acc_grad(p, |gp| {
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = values[p.0].numel();
                    gs.acc_slice(p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let len = values[node].cols();
                let rows = values[node].rows();
                let cols = values[a.0].cols();
                gs.acc_grad(a, |ga| {
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * cols + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let cols = values[a.0].cols();
                gs.acc_grad(a, |ga| {
                    for (o, &s) in ga[start * cols..].iter_mut().zip(g) {
                        *o += s;
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (values[node].rows(), values[node].cols());
                // node is [r, c]; input is [c, r]
                gs.acc_grad(a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => gs.acc_slice(a, g),
            Op::Conv1d {
                x,
                w,
                b,
                dilation,
                padding,
            } => {
                let ws = values[w.0].shape().to_vec();
                let (k, cin, cout) = (ws[0], ws[1], ws[2]);
                let t = values[x.0].rows();
                if requires[x.0] {
                    let vw = &values[w.0];
                    gs.acc_grad(x, |gx| {
                        for tap in 0..k {
                            let off = tap_offset(tap, k, dilation, padding);
                            let (lo, hi) = valid_range(t, off);
                            if lo < hi {
                                let src = (lo as isize + off) as usize;
                                gemm_nt_acc(
                                    &g[lo * cout..hi * cout],
                                    &vw.data()[tap * cin * cout..(tap + 1) * cin * cout],
                                    &mut gx[src * cin..(src + hi - lo) * cin],
                                    hi - lo,
                                    cin,
                                    cout,
                                );
                            }
                        }
                    });
                }
                if requires[w.0] {
                    let vx = &values[x.0];
                    gs.acc_grad(w, |gw| {
                        for tap in 0..k {
                            let off = tap_offset(tap, k, dilation, padding);
                            let (lo, hi) = valid_range(t, off);
                            if lo < hi {
                                let src = (lo as isize + off) as usize;
                                gemm_tn_acc(
                                    &vx.data()[src * cin..(src + hi - lo) * cin],
                                    &g[lo * cout..hi * cout],
                                    &mut gw[tap * cin * cout..(tap + 1) * cin * cout],
                                    hi - lo,
                                    cin,
                                    cout,
                                );
                            }
                        }
                    });
                }
                if let Some(b) = b {
                    gs.acc_grad(b, |gb| {
                        for row in g.chunks(cout) {
                            for (o, &s) in gb.iter_mut().zip(row) {
                                *o += s;
                            }
                        }
                    });
                }
            }
            Op::ConvTranspose1d { x, w, b, stride } => {
                let ws = values[w.0].shape().to_vec();
                let (k, cin, cout) = (ws[0], ws[1], ws[2]);
                let t = values[x.0].rows();
                let len = t * stride;
                if requires[x.0] {
                    let vw = &values[w.0];
                    gs.acc_grad(x, |gx| {
                        for i in 0..t {
                            for tap in 0..k {
                                let o = i * stride + tap;
                                if o >= len {
                                    break;
                                }
                                gemm_nt_acc(
                                    &g[o * cout..(o + 1) * cout],
                                    &vw.data()[tap * cin * cout..(tap + 1) * cin * cout],
                                    &mut gx[i * cin..(i + 1) * cin],
                                    1,
                                    cin,
                                    cout,
                                );
                            }
                        }
                    });
                }
                if requires[w.0] {
                    let vx = &values[x.0];
                    gs.acc_grad(w, |gw| {
                        for i in 0..t {
                            for tap in 0..k {
                                let o = i * stride + tap;
                                if o >= len {
                                    break;
                                }
                                gemm_tn_acc(
                                    vx.row(i),
                                    &g[o * cout..(o + 1) * cout],
                                    &mut gw[tap * cin * cout..(tap + 1) * cin * cout],
                                    1,
                                    cin,
                                    cout,
                                );
                            }
                        }
                    });
                }
                if let Some(b) = b {
                    gs.acc_grad(b, |gb| {
                        for row in g.chunks(cout) {
                            for (o, &s) in gb.iter_mut().zip(row) {
                                *o += s;
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ref ids } => {
                let d = values[table.0].cols();
                gs.acc_grad(table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let t = xhat.len() / c.max(1);
                let gam = values[gamma.0].data().to_vec();
                gs.acc_grad(gamma, |gg| {
                    for r in 0..t {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                gs.acc_grad(beta, |gb| {
                    for r in 0..t {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                });
                gs.acc_grad(x, |gx| {
                    if batch_stats {
                        let n = T::from_usize_lossy(t);
                        let mut sum_d = vec![T::zero(); c];
                        let mut sum_dx = vec![T::zero(); c];
                        for r in 0..t {
                            for j in 0..c {
                                let d = g[r * c + j] * gam[j];
                                sum_d[j] += d;
                                sum_dx[j] += d * xhat[r * c + j];
                            }
                        }
                        for r in 0..t {
                            for j in 0..c {
                                let d = g[r * c + j] * gam[j];
                                gx[r * c + j] += inv_std[j] / n
                                    * (n * d - sum_d[j] - xhat[r * c + j] * sum_dx[j]);
                            }
                        }
                    } else {
                        for r in 0..t {
                            for j in 0..c {
                                gx[r * c + j] += g[r * c + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                gs.acc_grad(a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(a) => {
                let n = T::from_usize_lossy(values[a.0].numel().max(1));
                let s = g[0] / n;
                gs.acc_grad(a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::Fused(a, ref local) => {
                let s = g[0];
                gs.acc_grad(a, |ga| {
                    for (o, &l) in ga.iter_mut().zip(local) {
                        *o += s * l;
                    }
                });
            }
        }
    }
}

struct GradSink<'a, T> {
    values: &'a [Tensor<T>],
    requires: &'a [bool],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    fn acc_grad(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.requires[v.0] {
            return;
        }
        let n = self.values[v.0].numel();
        let g = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(g);
    }

    fn acc_slice(&mut self, v: Var, src: &[T]) {
        self.acc_grad(v, |g| {
            for (o, &s) in g.iter_mut().zip(src) {
                *o += s;
            }
        });
    }
}

/// Signed input offset read by kernel tap `tap` relative to the output time.
fn tap_offset(tap: usize, k: usize, dilation: usize, padding: Padding) -> isize {
    match padding {
        Padding::Same => (tap as isize - (k as isize - 1) / 2) * dilation as isize,
        Padding::Causal => -((k - 1 - tap) as isize) * dilation as isize,
    }
}

/// Output times `[lo, hi)` whose input `t + off` lies inside `[0, len)`.
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off.max(0)).max(0) as usize;
    (lo.min(len), hi.min(len).max(lo.min(len)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn product_rule_on_scalars() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0f64), true);
        let y = tape.leaf(Tensor::scalar(-2.0), true);
        let z = tape.mul(x, y).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-2.0]);
        assert_eq!(tape.grad(y).unwrap(), &[3.0]);
    }

    #[test]
    fn mse_gradient_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 4, &[1.0, 2.0, 3.0, 4.0]), true);
        let target = [0.5, 0.5, 0.5, 0.5];
        let l = tape.mse(x, &target).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let expect = 2.0 * ((i as f64 + 1.0) - 0.5) / 4.0;
            assert!((gi - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_twice_accumulates_leaf_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0f64), true);
        let y = tape.tanh(x);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        let once = tape.grad(x).unwrap()[0];
        tape.backward(l).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 2.0 * once).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 2, &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[0.0; 6]));
        let b = tape.constant(t2(2, 3, &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn causal_dilated_conv_reads_expected_taps() {
        // kernel 3, dilation 4: y[t] = w0 x[t-8] + w1 x[t-4] + w2 x[t]
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[12, 1], |i| (i * i) as f64));
        let w = tape.constant(Tensor::new(vec![3, 1, 1], vec![100.0, 10.0, 1.0]).unwrap());
        let y = tape.conv1d(x, w, None, 4, Padding::Causal).unwrap();
        let yv = tape.value(y).data().to_vec();
        for t in 0..12 {
            let xv = |s: isize| if s >= 0 { (s * s) as f64 } else { 0.0 };
            let t = t as isize;
            let expect = 100.0 * xv(t - 8) + 10.0 * xv(t - 4) + xv(t);
            assert_eq!(yv[t as usize], expect);
        }
    }

    #[test]
    fn same_conv_preserves_length() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[7, 2], |i| i as f64));
        let w = tape.constant(Tensor::full(&[5, 2, 3], 1.0));
        let y = tape.conv1d(x, w, None, 1, Padding::Same).unwrap();
        assert_eq!(tape.shape(y), &[7, 3]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 3, &[1.0, -2.0, 30.0, 0.1, 0.2, 0.3]));
        for axis in [0, 1] {
            let y = tape.softmax(x, axis).unwrap();
            let v = tape.value(y);
            if axis == 1 {
                for r in 0..2 {
                    assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            } else {
                for c in 0..3 {
                    assert!((v.at(0, c) + v.at(1, c) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_norm_training_output_is_standardized() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[50, 3], |i| {
            ((i * 37) % 11) as f64 * 0.7 - 2.0 + (i % 3) as f64
        }));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (y, stats) = tape.batch_norm(x, g, b, None).unwrap();
        assert!(stats.is_some());
        let v = tape.value(y);
        for c in 0..3 {
            let col: Vec<f64> = (0..50).map(|r| v.at(r, c)).collect();
            let m = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_transpose_with_identity_taps_repeats_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut w = vec![0.0; 4 * 2 * 2];
        for tap in 0..4 {
            w[tap * 4] = 1.0;
            w[tap * 4 + 3] = 1.0;
        }
        let w = tape.constant(Tensor::new(vec![4, 2, 2], w).unwrap());
        let y = tape.conv_transpose1d(x, w, None, 4).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[12, 2]);
        for r in 0..12 {
            assert_eq!(
                v.row(r),
                &[(2 * (r / 4) + 1) as f64, (2 * (r / 4) + 2) as f64]
            );
        }
    }
}
