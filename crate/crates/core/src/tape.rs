//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! A [`Tape`] owns every intermediate value. Ops append nodes in execution
//! order and [`Tape::backward`] walks the record from the loss back to the
//! first node. Leaf gradients accumulate across `backward` calls until
//! [`Tape::zero_grad`].

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds. Binary kinds broadcast with trailing-axis
/// alignment; unary kinds ignore the second operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Softplus,
    Silu,
    Gelu,
    Sqrt,
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Softplus,
    Silu,
    Gelu,
    Sqrt,
    Abs,
    Square,
    Scale(f64),
    Offset(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Backward rule for a fused op defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the upstream gradient.
    /// `None` marks an input that receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Gather {
        x: Var,
        axis: usize,
        perm: Vec<usize>,
    },
    Reshape(Var),
    TransposeLast2(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` in the overflow-safe form `max(x, 0) + ln(1 + e^{-|x|})`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Softplus => softplus(x),
            Unary::Silu => silu(x),
            Unary::Gelu => gelu(x),
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Scale(s) => s * x,
            Unary::Offset(c) => x + c,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// d out / d in, given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Softplus => sigmoid(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            // Subgradient 0 at the origin keeps zero-variance statistics finite.
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Scale(s) => s,
            Unary::Offset(_) => 1.0,
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Record a leaf. Only leaves with `requires_grad` collect gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.borrow().get(v.0).cloned().flatten()
    }

    pub fn grads(&self) -> Ref<'_, Vec<Option<Tensor>>> {
        self.grads.borrow()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    fn unary(&self, kind: Unary, a: Var) -> Var {
        let x = self.value(a);
        let y = x.map(|v| kind.apply(v));
        self.push(y, Op::Unary(kind, a), self.rg(a))
    }

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let out = match kind {
            Binary::Add => tensor::broadcast_zip("add", &x, &y, |p, q| p + q),
            Binary::Sub => tensor::broadcast_zip("sub", &x, &y, |p, q| p - q),
            Binary::Mul => tensor::broadcast_zip("mul", &x, &y, |p, q| p * q),
            Binary::Div => tensor::broadcast_zip("div", &x, &y, |p, q| p / q),
        }?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn elementwise(&self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| Error::Config(format!("{op:?} needs a second operand")))
        };
        match op {
            ElementwiseOp::Add => self.binary(Binary::Add, a, need_b()?),
            ElementwiseOp::Sub => self.binary(Binary::Sub, a, need_b()?),
            ElementwiseOp::Mul => self.binary(Binary::Mul, a, need_b()?),
            ElementwiseOp::Div => self.binary(Binary::Div, a, need_b()?),
            ElementwiseOp::Neg => Ok(self.unary(Unary::Neg, a)),
            ElementwiseOp::Exp => Ok(self.unary(Unary::Exp, a)),
            ElementwiseOp::Softplus => Ok(self.unary(Unary::Softplus, a)),
            ElementwiseOp::Silu => Ok(self.unary(Unary::Silu, a)),
            ElementwiseOp::Gelu => Ok(self.unary(Unary::Gelu, a)),
            ElementwiseOp::Sqrt => Ok(self.unary(Unary::Sqrt, a)),
            ElementwiseOp::Abs => Ok(self.unary(Unary::Abs, a)),
            ElementwiseOp::Square => Ok(self.unary(Unary::Square, a)),
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(Unary::Scale(s), a)
    }

    pub fn offset(&self, a: Var, c: f64) -> Var {
        self.unary(Unary::Offset(c), a)
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(&self.value(a), &self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Normalize over the last axis, then apply `gain` and `bias` of shape `[D]`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or(Error::AxisOutOfRange { axis: 0, rank: 0 })?;
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let out = Tensor::new(shape.clone(), out)?;
        let xhat = Tensor::new(shape, xhat)?;
        Ok(self.push(
            out,
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

    /// Reorder entries along `axis`: `out[.., i, ..] = x[.., perm[i], ..]`.
    pub fn permute_axis(&self, x: Var, axis: usize, perm: &[usize]) -> Result<Var> {
        let out = tensor::gather_axis(&self.value(x), axis, perm)?;
        Ok(self.push(
            out,
            Op::Gather {
                x,
                axis,
                perm: perm.to_vec(),
            },
            self.rg(x),
        ))
    }

    pub fn reverse_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let perm: Vec<usize> = (0..shape[axis]).rev().collect();
        self.permute_axis(x, axis, &perm)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), self.rg(x)))
    }

    pub fn transpose_last2(&self, x: Var) -> Result<Var> {
        let out = tensor::transpose_last2(&self.value(x))?;
        Ok(self.push(out, Op::TransposeLast2(x), self.rg(x)))
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = tensor::narrow(&self.value(x), axis, start, len)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, self.rg(x)))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = tensor::concat(&refs, axis)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), self.rg(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let m = self.value(x).mean();
        self.push(Tensor::scalar(m), Op::Mean(x), self.rg(x))
    }

    /// Sum over `axis`, keeping a length-1 axis.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::sum_axis(&self.value(x), axis)?;
        Ok(self.push(out, Op::SumAxis(x), self.rg(x)))
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Record the output of a fused op whose forward was computed by the caller.
    pub fn custom(&self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Propagate d loss / d node back through the record and add the result
    /// into every `requires_grad` leaf's accumulated gradient.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let lshape = nodes[loss.0].value.shape();
        if lshape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(lshape.to_vec()));
        }
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lshape));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |v: Var| Rc::clone(&nodes[v.0].value);
            let rg = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Unary(kind, a) => {
                    let x = val(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .zip(g.data())
                        .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                        .collect();
                    acc(&mut grads, *a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::Binary(kind, a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let (ga, gb) = match kind {
                        Binary::Add => (g.clone(), g.clone()),
                        Binary::Sub => (g.clone(), g.map(|v| -v)),
                        Binary::Mul => (
                            tensor::broadcast_zip("mul", &g, &y, |p, q| p * q)?,
                            tensor::broadcast_zip("mul", &g, &x, |p, q| p * q)?,
                        ),
                        Binary::Div => {
                            let ga = tensor::broadcast_zip("div", &g, &y, |p, q| p / q)?;
                            // d(x/y)/dy = -out / y
                            let t = tensor::broadcast_zip("mul", &g, &node.value, |p, q| p * q)?;
                            let gb = tensor::broadcast_zip("div", &t, &y, |p, q| -p / q)?;
                            (ga, gb)
                        }
                    };
                    if rg(*a) {
                        acc(&mut grads, *a, tensor::reduce_to_shape(&ga, x.shape()));
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, tensor::reduce_to_shape(&gb, y.shape()));
                    }
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = tensor::matmul_backward(&val(*a), &val(*b), &g);
                    if rg(*a) {
                        acc(&mut grads, *a, ga);
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = val(*gain);
                    let d = gv.numel();
                    let rows = xhat.numel() / d;
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut dx = vec![0.0; xhat.numel()];
                    for r in 0..rows {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let hr = &xhat.data()[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                            let dh = gr[j] * gv.data()[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv.data()[j];
                            dx[r * d + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    if rg(*x) {
                        acc(&mut grads, *x, Tensor::new(xhat.shape().to_vec(), dx)?);
                    }
                    if rg(*gain) {
                        acc(&mut grads, *gain, Tensor::new(vec![d], dgain)?);
                    }
                    if rg(*bias) {
                        acc(&mut grads, *bias, Tensor::new(vec![d], dbias)?);
                    }
                }
                Op::Gather { x, axis, perm } => {
                    acc(&mut grads, *x, tensor::scatter_axis(&g, *axis, perm));
                }
                Op::Reshape(x) => {
                    let s = val(*x).shape().to_vec();
                    acc(&mut grads, *x, g.reshape(&s)?);
                }
                Op::TransposeLast2(x) => {
                    acc(&mut grads, *x, tensor::transpose_last2(&g)?);
                }
                Op::Narrow { x, axis, start } => {
                    let s = val(*x).shape().to_vec();
                    acc(&mut grads, *x, tensor::narrow_backward(&g, &s, *axis, *start));
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if rg(p) {
                            acc(&mut grads, p, tensor::narrow(&g, *axis, start, len)?);
                        }
                        start += len;
                    }
                }
                Op::Sum(x) => {
                    let s = val(*x).shape().to_vec();
                    acc(&mut grads, *x, Tensor::full(&s, g.item()));
                }
                Op::Mean(x) => {
                    let xv = val(*x);
                    let n = xv.numel() as f64;
                    acc(&mut grads, *x, Tensor::full(xv.shape(), g.item() / n));
                }
                Op::SumAxis(x) => {
                    let xv = val(*x);
                    acc(&mut grads, *x, tensor::broadcast_zip("sum_axis", &Tensor::zeros(xv.shape()), &g, |_, q| q)?);
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<Rc<Tensor>> = inputs.iter().map(|&v| val(v)).collect();
                    let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
                    let gs = op.backward(&refs, &node.value, &g);
                    debug_assert_eq!(gs.len(), inputs.len(), "{} backward arity", op.name());
                    for (&v, gi) in inputs.iter().zip(gs) {
                        if let (true, Some(gi)) = (rg(v), gi) {
                            acc(&mut grads, v, gi);
                        }
                    }
                }
            }
        }

        let mut store = self.grads.borrow_mut();
        if store.len() < nodes.len() {
            store.resize(nodes.len(), None);
        }
        for (id, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &nodes[id].op) {
                match &mut store[id] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
