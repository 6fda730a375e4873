//! Reverse pass: adjoints for every recorded operation.

use crate::error::{Result, TensorError};
use crate::kernels::{self, MatView};
use crate::tape::{rel_bucket, MatmulGeometry, Op, Tape, Var};
use crate::tensor::Tensor;

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if it was reached.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let g = self.grads.get_mut(v.0)?.take()?;
        Some(Tensor::from_parts(self.shapes[v.0].clone(), g))
    }

    /// Gradient of `v`, or zeros of the right shape when unreached.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    /// Back-propagates from a scalar `loss` through every node recorded
    /// before it, visiting each node exactly once in reverse order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            // Keep intermediate gradients readable after the pass.
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, gv: Vec<f64>| accumulate(&mut grads[v.0], gv);

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    send(*a, kernels::unbroadcast(g, out.shape(), val(*a).shape()));
                }
                if wants(*b) {
                    let mut gb = kernels::unbroadcast(g, out.shape(), val(*b).shape());
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    send(*b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (val(*a), val(*b));
                let (da, db) = (ta.data(), tb.data());
                if wants(*a) {
                    let mut ga = vec![0.0; da.len()];
                    kernels::for_each_broadcast(out.shape(), ta.shape(), tb.shape(), |o, ia, ib| {
                        ga[ia] += if is_div { g[o] / db[ib] } else { g[o] * db[ib] };
                    });
                    send(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; db.len()];
                    kernels::for_each_broadcast(out.shape(), ta.shape(), tb.shape(), |o, ia, ib| {
                        gb[ib] += if is_div {
                            -g[o] * da[ia] / (db[ib] * db[ib])
                        } else {
                            g[o] * da[ia]
                        };
                    });
                    send(*b, gb);
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, g.to_vec()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let geo = MatmulGeometry::new(ta.shape(), tb.shape()).expect("recorded matmul");
                let (m, k, n) = (geo.m, geo.k, geo.n);
                if wants(*a) {
                    let mut ga = vec![0.0; ta.numel()];
                    for bi in 0..geo.batch {
                        let beta = if geo.a_batched || bi == 0 { 0.0 } else { 1.0 };
                        kernels::gemm(
                            m,
                            n,
                            k,
                            g,
                            MatView::rows(bi * m * n, n),
                            tb.data(),
                            MatView::transposed(geo.b_offset(bi), n),
                            &mut ga,
                            geo.a_offset(bi),
                            beta,
                        );
                    }
                    send(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; tb.numel()];
                    for bi in 0..geo.batch {
                        let beta = if geo.b_batched || bi == 0 { 0.0 } else { 1.0 };
                        kernels::gemm(
                            k,
                            m,
                            n,
                            ta.data(),
                            MatView::transposed(geo.a_offset(bi), k),
                            g,
                            MatView::rows(bi * m * n, n),
                            &mut gb,
                            geo.b_offset(bi),
                            beta,
                        );
                    }
                    send(*b, gb);
                }
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, gx) = kernels::permute(g, out.shape(), &inverse);
                send(*x, gx);
            }
            Op::Concat(xs, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let w = val(x).shape()[*axis] * inner;
                    if wants(x) {
                        let mut gx = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            gx.extend_from_slice(&g[o * total + offset..][..w]);
                        }
                        send(x, gx);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = val(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let mut gx = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                send(*x, gx);
            }
            Op::Sum { x, axis } => {
                let shape = val(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut gx = Vec::with_capacity(val(*x).numel());
                for o in 0..outer {
                    for _ in 0..shape[*axis] {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                send(*x, gx);
            }
            Op::SumAll(x) => send(*x, vec![g[0]; val(*x).numel()]),
            Op::Sqrt(x) => send(*x, g.iter().zip(out.data()).map(|(g, y)| g * 0.5 / y).collect()),
            Op::Exp(x) => send(*x, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Sigmoid(x) => send(*x, g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Tanh(x) => send(*x, g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Gelu(x) => send(
                *x,
                g.iter().zip(val(*x).data()).map(|(g, &v)| g * kernels::gelu_grad(v)).collect(),
            ),
            Op::Square(x) => send(*x, g.iter().zip(val(*x).data()).map(|(g, v)| 2.0 * g * v).collect()),
            Op::ClampMin(x, floor) => send(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| if v > *floor { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax(x) => {
                let cols = *out.shape().last().expect("softmax rank");
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks_exact(cols).zip(out.data().chunks_exact(cols)).zip(gx.chunks_exact_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = *out.shape().last().expect("layer_norm rank");
                let gd = val(*gain).data();
                if wants(*gain) {
                    let mut gg = vec![0.0; cols];
                    for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                    send(*gain, gg);
                }
                if wants(*bias) {
                    let mut gb = vec![0.0; cols];
                    for gr in g.chunks_exact(cols) {
                        for c in 0..cols {
                            gb[c] += gr[c];
                        }
                    }
                    send(*bias, gb);
                }
                if wants(*x) {
                    let nf = cols as f64;
                    let mut gx = vec![0.0; g.len()];
                    for (r, (gr, hr)) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            let dh = gr[c] * gd[c];
                            s1 += dh;
                            s2 += dh * hr[c];
                        }
                        let scale = rstd[r] / nf;
                        for c in 0..cols {
                            let dh = gr[c] * gd[c];
                            gx[r * cols + c] = scale * (nf * dh - s1 - hr[c] * s2);
                        }
                    }
                    send(*x, gx);
                }
            }
            Op::Dropout(x, mask) => send(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::DepthwiseConv { x, kernel } => {
                let (tx, tk) = (val(*x), val(*kernel));
                let (len, ch) = (tx.shape()[0], tx.shape()[1]);
                let k = tk.shape()[0];
                let half = k / 2;
                let (dx, dk) = (tx.data(), tk.data());
                let mut gx = vec![0.0; dx.len()];
                let mut gk = vec![0.0; dk.len()];
                for t in 0..len {
                    for j in 0..k {
                        let src = t + j;
                        if src < half || src - half >= len {
                            continue;
                        }
                        let s = src - half;
                        for c in 0..ch {
                            let gv = g[t * ch + c];
                            gx[s * ch + c] += gv * dk[j * ch + c];
                            gk[j * ch + c] += gv * dx[s * ch + c];
                        }
                    }
                }
                if wants(*x) {
                    send(*x, gx);
                }
                if wants(*kernel) {
                    send(*kernel, gk);
                }
            }
            Op::Dct { x, inverse } => {
                let s = out.shape();
                send(*x, kernels::dct_apply(g, s[0], s[1], !inverse));
            }
            Op::Cumsum(x) => {
                let inner: usize = out.shape()[1..].iter().product();
                let mut gx = g.to_vec();
                for i in (0..gx.len().saturating_sub(inner)).rev() {
                    gx[i] += gx[i + inner];
                }
                send(*x, gx);
            }
            Op::RelativeBias { table, radius } => {
                let s = out.shape();
                let (heads, queries, keys) = (s[0], s[1], s[2]);
                let width = 2 * radius + 1;
                let mut gt = vec![0.0; heads * width];
                for h in 0..heads {
                    for i in 0..queries {
                        for j in 0..keys {
                            gt[h * width + rel_bucket(i, j, *radius)] += g[(h * queries + i) * keys + j];
                        }
                    }
                }
                send(*table, gt);
            }
        }
    }
}
