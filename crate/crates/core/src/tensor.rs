//! Dense row-major `f64` tensors and the raw kernels the tape is built on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::BadBuffer {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn strides(&self) -> Vec<usize> {
        contiguous_strides(&self.shape)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of length {dim}");
            off = off * dim + ix;
        }
        off
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::AxisOutOfRange { axis, rank })
    } else {
        Ok(())
    }
}

/// Trailing-axis aligned broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` expressed in the coordinates of the broadcast shape
/// `out`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Source offsets into `shape` for every element of the broadcast shape `out`.
fn broadcast_offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let n: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Elementwise binary map with broadcasting.
pub fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out = broadcast_shape(op, &a.shape, &b.shape)?;
    let n: usize = out.iter().product();
    let data = if a.shape == out && is_suffix(&b.shape, &out) {
        let m = b.data.len();
        (0..n).map(|i| f(a.data[i], b.data[i % m])).collect()
    } else {
        let oa = broadcast_offsets(&a.shape, &out);
        let ob = broadcast_offsets(&b.shape, &out);
        (0..n).map(|i| f(a.data[oa[i]], b.data[ob[i]])).collect()
    };
    Ok(Tensor { shape: out, data })
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Sum a gradient of broadcast shape back down to `shape`.
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let n_src: usize = shape.iter().product();
    let mut out = vec![0.0; n_src];
    if is_suffix(shape, &grad.shape) {
        for (i, g) in grad.data.iter().enumerate() {
            out[i % n_src] += g;
        }
    } else {
        let offs = broadcast_offsets(shape, &grad.shape);
        for (g, &o) in grad.data.iter().zip(&offs) {
            out[o] += g;
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}

/// Batched matrix product `[.., m, k] x [.., k, n]` with broadcast batch axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = MatmulPlan::new(a.shape(), b.shape())?;
    let mut out = vec![0.0; plan.out_shape.iter().product()];
    let (m, k, n) = (plan.m, plan.k, plan.n);
    for (bi, &(oa, ob)) in plan.batches.iter().enumerate() {
        let c = &mut out[bi * m * n..(bi + 1) * m * n];
        gemm_acc(&a.data[oa..oa + m * k], &b.data[ob..ob + k * n], c, m, k, n);
    }
    Ok(Tensor {
        shape: plan.out_shape,
        data: out,
    })
}

/// Gradients of `matmul(a, b)` for upstream gradient `g`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let plan = MatmulPlan::new(a.shape(), b.shape()).expect("shapes validated in forward");
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    for (bi, &(oa, ob)) in plan.batches.iter().enumerate() {
        let gc = &g.data[bi * m * n..(bi + 1) * m * n];
        let am = &a.data[oa..oa + m * k];
        let bm = &b.data[ob..ob + k * n];
        // dA = dC · Bᵀ
        let ga_blk = &mut ga[oa..oa + m * k];
        for i in 0..m {
            for p in 0..k {
                let mut s = 0.0;
                for j in 0..n {
                    s += gc[i * n + j] * bm[p * n + j];
                }
                ga_blk[i * k + p] += s;
            }
        }
        // dB = Aᵀ · dC
        let gb_blk = &mut gb[ob..ob + k * n];
        for i in 0..m {
            for p in 0..k {
                let av = am[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &mut gb_blk[p * n..(p + 1) * n];
                for (r, &gv) in row.iter_mut().zip(&gc[i * n..(i + 1) * n]) {
                    *r += av * gv;
                }
            }
        }
    }
    (
        Tensor {
            shape: a.shape.clone(),
            data: ga,
        },
        Tensor {
            shape: b.shape.clone(),
            data: gb,
        },
    )
}

fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (offset into a, offset into b) for each output batch matrix.
    batches: Vec<(usize, usize)>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch = broadcast_shape("matmul", ba, bb).map_err(|_| mismatch())?;
        let oa = broadcast_offsets(ba, &batch);
        let ob = broadcast_offsets(bb, &batch);
        let batches = oa
            .into_iter()
            .zip(ob)
            .map(|(x, y)| (x * m * k, y * k * n))
            .collect();
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            batches,
        })
    }
}

/// Split a shape around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `out[.., i, ..] = x[.., perm[i], ..]` along `axis`.
pub fn gather_axis(x: &Tensor, axis: usize, perm: &[usize]) -> Result<Tensor> {
    check_axis(axis, x.rank())?;
    let (outer, len, inner) = axis_extents(&x.shape, axis);
    if perm.len() != len || perm.iter().any(|&p| p >= len) {
        return Err(Error::ShapeMismatch {
            op: "gather_axis",
            lhs: x.shape.clone(),
            rhs: vec![perm.len()],
        });
    }
    let mut data = vec![0.0; x.numel()];
    for o in 0..outer {
        for (i, &p) in perm.iter().enumerate() {
            let dst = (o * len + i) * inner;
            let src = (o * len + p) * inner;
            data[dst..dst + inner].copy_from_slice(&x.data[src..src + inner]);
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Inverse of `gather_axis` for a permutation.
pub fn scatter_axis(g: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    let (outer, len, inner) = axis_extents(&g.shape, axis);
    let mut data = vec![0.0; g.numel()];
    for o in 0..outer {
        for (i, &p) in perm.iter().enumerate() {
            let src = (o * len + i) * inner;
            let dst = (o * len + p) * inner;
            for j in 0..inner {
                data[dst + j] += g.data[src + j];
            }
        }
    }
    Tensor {
        shape: g.shape.clone(),
        data,
    }
}

pub fn reverse_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(axis, x.rank())?;
    let len = x.shape[axis];
    let perm: Vec<usize> = (0..len).rev().collect();
    gather_axis(x, axis, &perm)
}

/// Entries `start..start+len` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis(axis, x.rank())?;
    let (outer, full, inner) = axis_extents(&x.shape, axis);
    if start + len > full {
        return Err(Error::ShapeMismatch {
            op: "narrow",
            lhs: x.shape.clone(),
            rhs: vec![start, len],
        });
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor { shape, data })
}

pub(crate) fn narrow_backward(g: &Tensor, full_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, full, inner) = axis_extents(full_shape, axis);
    let len = g.shape[axis];
    let mut data = vec![0.0; full_shape.iter().product()];
    for o in 0..outer {
        let src = o * len * inner;
        let dst = (o * full + start) * inner;
        data[dst..dst + len * inner].copy_from_slice(&g.data[src..src + len * inner]);
    }
    Tensor {
        shape: full_shape.to_vec(),
        data,
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?;
    check_axis(axis, first.rank())?;
    let mut shape = first.shape.clone();
    shape[axis] = 0;
    for p in parts {
        let mut s = p.shape.clone();
        if s.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        shape[axis] += s[axis];
        s[axis] = 0;
        let mut t = shape.clone();
        t[axis] = 0;
        if s != t {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    let (outer, _, inner) = axis_extents(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let l = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * l..(o + 1) * l]);
        }
    }
    Ok(Tensor { shape, data })
}

/// Swap the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::AxisOutOfRange { axis: 1, rank: r });
    }
    let (m, n) = (x.shape[r - 2], x.shape[r - 1]);
    let batch = x.numel() / (m * n).max(1);
    let mut data = vec![0.0; x.numel()];
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                data[base + j * m + i] = x.data[base + i * n + j];
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.swap(r - 2, r - 1);
    Ok(Tensor { shape, data })
}

/// Sum over `axis`, keeping it with length 1.
pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(axis, x.rank())?;
    let (outer, len, inner) = axis_extents(&x.shape, axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..len {
            let src = (o * len + i) * inner;
            for j in 0..inner {
                data[o * inner + j] += x.data[src + j];
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[axis] = 1;
    Ok(Tensor { shape, data })
}
