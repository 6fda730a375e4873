//! The recording tape and every differentiable forward operation.

use crate::error::{Result, TensorError};
use crate::kernels::{self, DropoutKey, MatView};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum { x: Var, axis: usize },
    SumAll(Var),
    Sqrt(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Square(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    DepthwiseConv { x: Var, kernel: Var },
    Dct { x: Var, inverse: bool },
    Cumsum(Var),
    RelativeBias { table: Var, radius: usize },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Ordered record of operations; gradients flow backward through it.
///
/// Each forward method appends one node and returns its handle. A node
/// requires a gradient when any of its inputs does.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
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

    /// Drops every recorded node; previously issued handles become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape =
            kernels::broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::mismatch(name, &sa, &sb))?;
        let n: usize = out_shape.iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; n];
        kernels::for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, out), op, rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x);
        let out = Tensor::from_parts(value.shape().to_vec(), value.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `max(x, floor)` elementwise; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    /// Batched matrix product `[.., m, k] × [.., k, n] -> [.., m, n]`.
    ///
    /// Batch axes must match exactly, or one side must be a plain matrix
    /// that is shared across the other side's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let geo = MatmulGeometry::new(&sa, &sb)?;
        let mut out = vec![0.0; geo.batch * geo.m * geo.n];
        let (da, db) = (self.data(a), self.data(b));
        for bi in 0..geo.batch {
            kernels::gemm(
                geo.m,
                geo.k,
                geo.n,
                da,
                MatView::rows(geo.a_offset(bi), geo.k),
                db,
                MatView::rows(geo.b_offset(bi), geo.n),
                &mut out,
                bi * geo.m * geo.n,
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(geo.out_shape, out), Op::MatMul(a, b), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let (out_shape, out) = kernels::permute(self.data(x), &shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::invalid("transpose", format!("needs rank >= 2, got {:?}", self.shape(x))));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x).to_vec();
        if shape.iter().product::<usize>() != old.iter().product::<usize>() || shape.contains(&0) {
            return Err(TensorError::mismatch("reshape", &old, shape));
        }
        let out = Tensor::from_parts(shape.to_vec(), self.data(x).to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let w = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.data(x)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Slice { x, axis, start }, rg))
    }

    /// Sums over `axis`. With `keepdim` the axis stays with extent 1.
    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("sum", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..shape[axis] {
                let src = &d[(o * shape[axis] + a) * inner..][..inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Sum { x, axis }, rg))
    }

    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| TensorError::invalid("mean", format!("axis {axis} out of range")))?;
        let s = self.sum(x, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for (row, dst) in d.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - max).exp();
                z += *o;
            }
            for o in dst.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(TensorError::mismatch("layer_norm", &shape, self.shape(p)));
            }
        }
        let d = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = d.len() / cols;
        let mut xhat = vec![0.0; d.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout. Returns `x` itself when `train` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, key: DropoutKey) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let value = self.value(x);
        let mask = key.mask(value.numel(), p);
        let out: Vec<f64> = value.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = value.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout(x, mask), rg))
    }

    /// Per-channel convolution along time with zero "same" padding.
    /// `x` is `[L, C]`, `kernel` is `[K, C]` with odd `K`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 2 || sk.len() != 2 || sx[1] != sk[1] || sk[0].is_multiple_of(2) {
            return Err(TensorError::mismatch("depthwise_conv1d", &sx, &sk));
        }
        let (len, ch, k) = (sx[0], sx[1], sk[0]);
        let half = k / 2;
        let (dx, dk) = (self.data(x), self.data(kernel));
        let mut out = vec![0.0; len * ch];
        for t in 0..len {
            for j in 0..k {
                let src = t + j;
                if src < half || src - half >= len {
                    continue;
                }
                let s = src - half;
                let (orow, xrow, krow) = (t * ch, s * ch, j * ch);
                for c in 0..ch {
                    out[orow + c] += dk[krow + c] * dx[xrow + c];
                }
            }
        }
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(Tensor::from_parts(sx, out), Op::DepthwiseConv { x, kernel }, rg))
    }

    /// Kernel-size-one convolution: `[L, C] × [C, C'] -> [L, C']`.
    pub fn pointwise_conv1d(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 2 || sw.len() != 2 {
            return Err(TensorError::mismatch("pointwise_conv1d", &sx, &sw));
        }
        self.matmul(x, weight)
    }

    /// Orthonormal DCT-II along axis 0 of an `[L, C]` array.
    pub fn dct2(&mut self, x: Var) -> Result<Var> {
        self.dct(x, false)
    }

    /// Orthonormal DCT-III along axis 0; the inverse of [`Tape::dct2`].
    pub fn dct3(&mut self, x: Var) -> Result<Var> {
        self.dct(x, true)
    }

    fn dct(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::invalid(if inverse { "dct3" } else { "dct2" }, format!("expects [L, C], got {shape:?}")));
        }
        let out = kernels::dct_apply(self.data(x), shape[0], shape[1], inverse);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dct { x, inverse }, rg))
    }

    /// Running sum along axis 0.
    pub fn cumsum(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::invalid("cumsum", "scalar input"));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out = self.data(x).to_vec();
        for i in inner..out.len() {
            out[i] += out[i - inner];
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Cumsum(x), rg))
    }

    /// Expands a per-head offset table `[H, 2R+1]` into attention-logit biases
    /// `[H, queries, keys]`, where entry `(h, i, j)` reads offset `i - j`
    /// clipped to `[-R, R]`.
    pub fn relative_bias(&mut self, table: Var, queries: usize, keys: usize) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || st[1].is_multiple_of(2) {
            return Err(TensorError::invalid("relative_bias", format!("table must be [H, 2R+1], got {st:?}")));
        }
        let (heads, width) = (st[0], st[1]);
        let radius = width / 2;
        let d = self.data(table);
        let mut out = vec![0.0; heads * queries * keys];
        for h in 0..heads {
            for i in 0..queries {
                let row = &mut out[(h * queries + i) * keys..][..keys];
                for (j, o) in row.iter_mut().enumerate() {
                    *o = d[h * width + rel_bucket(i, j, radius)];
                }
            }
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![heads, queries, keys], out),
            Op::RelativeBias { table, radius },
            rg,
        ))
    }
}

pub(crate) fn rel_bucket(i: usize, j: usize, radius: usize) -> usize {
    let off = (i as isize - j as isize).clamp(-(radius as isize), radius as isize);
    (off + radius as isize) as usize
}

pub(crate) struct MatmulGeometry {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulGeometry {
    pub fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(TensorError::mismatch("matmul", sa, sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = if ba == bb || bb.is_empty() {
            ba
        } else if ba.is_empty() {
            bb
        } else {
            return Err(TensorError::mismatch("matmul", sa, sb));
        };
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let mut out_shape = batch_shape.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            batch: batch_shape.iter().product(),
            a_batched: !ba.is_empty(),
            b_batched: !bb.is_empty(),
            out_shape,
        })
    }

    pub fn a_offset(&self, bi: usize) -> usize {
        if self.a_batched {
            bi * self.m * self.k
        } else {
            0
        }
    }

    pub fn b_offset(&self, bi: usize) -> usize {
        if self.b_batched {
            bi * self.k * self.n
        } else {
            0
        }
    }
}
