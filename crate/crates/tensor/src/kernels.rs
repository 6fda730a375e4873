//! Raw numeric kernels shared by the forward and backward passes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major matrix view: pointer offset plus row/column strides.
#[derive(Clone, Copy)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn rows(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major block with `cols` columns.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha * a · b + beta * c` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: MatView,
    b: &[f64],
    bv: MatView,
    c: &mut [f64],
    c_offset: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_offset + m * n <= c.len());
    // SAFETY: extents were validated by the callers against the buffer
    // lengths; strides describe in-bounds row-major blocks.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(c_offset),
            n as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + pad] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    if a == out && out.ends_with(b) {
        for i in 0..n {
            f(i, i, i % nb);
        }
        return;
    }
    if b == out && out.ends_with(a) {
        for i in 0..n {
            f(i, i % na, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn unbroadcast(grad: &[f64], out: &[usize], shape: &[usize]) -> Vec<f64> {
    if out == shape {
        return grad.to_vec();
    }
    let n: usize = shape.iter().product();
    let mut acc = vec![0.0; n];
    for_each_broadcast(out, shape, out, |o, ia, _| acc[ia] += grad[o]);
    acc
}

/// Strides of a contiguous row-major array.
pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Copies `src` (with `shape`) into the axis order `perm`.
pub(crate) fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        return (out_shape, src.to_vec());
    }
    // Innermost axis handled as a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

thread_local! {
    static DCT_CACHE: RefCell<HashMap<usize, Rc<Vec<f64>>>> = RefCell::new(HashMap::new());
}

/// Orthonormal DCT-II matrix `D[k][n]` of size `len×len`.
pub(crate) fn dct_matrix(len: usize) -> Rc<Vec<f64>> {
    DCT_CACHE.with(|cache| {
        cache
            .borrow_mut()
            .entry(len)
            .or_insert_with(|| {
                let l = len as f64;
                let mut m = vec![0.0; len * len];
                for k in 0..len {
                    let scale = if k == 0 { (1.0 / l).sqrt() } else { (2.0 / l).sqrt() };
                    for n in 0..len {
                        let arg = std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2.0 * l);
                        m[k * len + n] = scale * arg.cos();
                    }
                }
                Rc::new(m)
            })
            .clone()
    })
}

/// Applies the DCT matrix (or its transpose) along axis 0 of an `[len, cols]` array.
pub(crate) fn dct_apply(x: &[f64], len: usize, cols: usize, inverse: bool) -> Vec<f64> {
    let d = dct_matrix(len);
    let mut out = vec![0.0; len * cols];
    let view = if inverse {
        MatView::transposed(0, len)
    } else {
        MatView::rows(0, len)
    };
    gemm(len, len, cols, &d, view, x, MatView::rows(0, cols), &mut out, 0, 0.0);
    out
}

/// Identifies one dropout site: identical keys give identical masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
    pub op_id: u64,
}

impl DropoutKey {
    pub fn new(seed: u64, step: u64, op_id: u64) -> Self {
        Self { seed, step, op_id }
    }

    /// Survival mask already scaled by `1 / (1 - p)`.
    pub(crate) fn mask(&self, n: usize, p: f64) -> Vec<f64> {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.step.to_le_bytes());
        key[16..24].copy_from_slice(&self.op_id.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        let keep = 1.0 / (1.0 - p);
        (0..n)
            .map(|_| if rng.random::<f64>() >= p { keep } else { 0.0 })
            .collect()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
