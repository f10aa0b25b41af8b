//! N-dimensional `f64` tensors with reverse-mode automatic differentiation.
//!
//! Values are immutable after construction. Differentiation is recorded on a
//! [`Tape`] scoped to one forward pass: attach inputs with [`Tape::watch`],
//! compute, then call [`Tape::backward`]. Gradients themselves can be
//! recorded (`create_graph`) which is what powers differentiating through
//! gradient norms.

mod check;
mod op;
mod tape;
mod vjp;

pub use check::{finite_diff_grad, GradCheckItem, GradCheckReport};
pub use op::Op;
pub use tape::Tape;

use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Tensor {
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    pub(crate) node: Option<tape::NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<f64> = self.data.iter().take(6).copied().collect();
        let ell = if self.data.len() > 6 { ", .." } else { "" };
        write!(f, "Tensor(shape={:?}, data={head:?}{ell})", self.shape)
    }
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            op::numel(shape),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            data: Rc::new(data),
            shape: shape.to_vec(),
            requires_grad: false,
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![0.0; op::numel(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![1.0; op::numel(shape)], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::from_vec(vec![v; op::numel(shape)], shape)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = op::numel(shape);
        Tensor::from_vec((0..n).map(&mut f).collect(), shape)
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
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

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a one-element tensor.
    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "scalar_value on shape {:?}", self.shape);
        self.data[0]
    }

    /// Element at a multi-index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.rank());
        let strides = op::strides_of(&self.shape);
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    /// Same values, no tape node, no grad requirement.
    pub fn detach(&self) -> Tensor {
        Tensor {
            data: Rc::clone(&self.data),
            shape: self.shape.clone(),
            requires_grad: false,
            node: None,
        }
    }

    /// NaN/Inf validation hook. `context` names the value being checked.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: context.to_string(),
                    detail: format!("element {i} of shape {:?} is {v}", self.shape),
                });
            }
        }
        Ok(())
    }

    // ── Primitive wrappers ──────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        tape::apply(Op::Add, &[self, rhs])
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        tape::apply(Op::Sub, &[self, rhs])
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        tape::apply(Op::Mul, &[self, rhs])
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        tape::apply(Op::Div, &[self, rhs])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        tape::apply(Op::AddScalar(c), &[self])
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        tape::apply(Op::MulScalar(c), &[self])
    }

    pub fn pow_scalar(&self, k: f64) -> Result<Tensor> {
        tape::apply(Op::PowScalar(k), &[self])
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> Result<Tensor> {
        tape::apply(Op::Exp, &[self])
    }

    pub fn log(&self) -> Result<Tensor> {
        tape::apply(Op::Log, &[self])
    }

    pub fn tanh(&self) -> Result<Tensor> {
        tape::apply(Op::Tanh, &[self])
    }

    pub fn relu(&self) -> Result<Tensor> {
        tape::apply(Op::Relu, &[self])
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        tape::apply(Op::LeakyRelu(slope), &[self])
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        tape::apply(Op::Matmul, &[self, rhs])
    }

    pub fn transpose(&self) -> Result<Tensor> {
        tape::apply(Op::Transpose, &[self])
    }

    pub fn sum_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor> {
        tape::apply(Op::SumAxes { axes: axes.to_vec(), keep }, &[self])
    }

    pub fn max_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor> {
        tape::apply(Op::MaxAxes { axes: axes.to_vec(), keep }, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        tape::apply(Op::Reshape { shape: shape.to_vec() }, &[self])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        tape::apply(Op::BroadcastTo { shape: shape.to_vec() }, &[self])
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        tape::apply(Op::Concat { axis }, parts)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        tape::apply(Op::Slice { axis, start, len }, &[self])
    }

    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        tape::apply(Op::Conv2d { stride, pad }, &[self, kernel])
    }

    pub(crate) fn conv2d_bwd_input(grad: &Tensor, kernel: &Tensor, stride: usize, pad: usize, in_h: usize, in_w: usize) -> Result<Tensor> {
        tape::apply(Op::ConvBwdInput { stride, pad, in_h, in_w }, &[grad, kernel])
    }

    pub(crate) fn conv2d_bwd_kernel(grad: &Tensor, input: &Tensor, stride: usize, pad: usize, kh: usize, kw: usize) -> Result<Tensor> {
        tape::apply(Op::ConvBwdKernel { stride, pad, kh, kw }, &[grad, input])
    }

    pub fn upsample_nn_2x(&self) -> Result<Tensor> {
        tape::apply(Op::UpsampleNn2x, &[self])
    }

    pub fn downsample_sum_2x(&self) -> Result<Tensor> {
        tape::apply(Op::DownsampleSum2x, &[self])
    }

    // ── Composites ──────────────────────────────────────────────────

    pub fn mean_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor> {
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();
        self.sum_axes(axes, keep)?.mul_scalar(1.0 / count as f64)
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        self.sum_all()?.mul_scalar(1.0 / self.numel() as f64)
    }

    /// Numerically stable softmax along one axis. The subtracted max is
    /// detached; softmax is shift-invariant so this leaves all derivatives
    /// untouched.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let m = self.max_axes(&[axis], true)?.detach();
        let e = self.sub(&m)?.exp()?;
        let s = e.sum_axes(&[axis], true)?;
        e.div(&s)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.neg()?.exp()?.add_scalar(1.0)?.pow_scalar(-1.0)
    }

    /// |x| as relu(x) + relu(-x); subgradient 0 at the kink.
    pub fn abs(&self) -> Result<Tensor> {
        self.relu()?.add(&self.neg()?.relu()?)
    }

    /// Euclidean norm over the trailing `n_axes` axes.
    pub fn l2_norm_trailing(&self, n_axes: usize) -> Result<Tensor> {
        assert!(n_axes >= 1 && n_axes <= self.rank());
        let axes: Vec<usize> = (self.rank() - n_axes..self.rank()).collect();
        self.mul(self)?.sum_axes(&axes, false)?.pow_scalar(0.5)
    }

    /// Map raw values through `f` producing a detached constant. Used for
    /// piecewise-constant factors (masks) whose own derivative is zero.
    pub(crate) fn map_detached(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(self.data.iter().map(|&x| f(x)).collect(), &self.shape)
    }
}

/// Generic primitive application: the spec-level entry point. `attrs` live
/// inside the [`Op`] value.
pub fn apply_primitive(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    tape::apply(op, inputs)
}

/// Reduce `g` (a gradient w.r.t. a broadcast result) back to `target` shape
/// by summing over the expanded axes.
pub(crate) fn sum_to_shape(g: &Tensor, target: &[usize]) -> Result<Tensor> {
    if g.shape() == target {
        return Ok(g.clone());
    }
    let rank = g.rank();
    let offset = rank - target.len();
    let mut axes = Vec::new();
    for d in 0..rank {
        if d < offset || (target[d - offset] == 1 && g.shape[d] != 1) {
            axes.push(d);
        }
    }
    let summed = if axes.is_empty() { g.clone() } else { g.sum_axes(&axes, true)? };
    summed.reshape(target)
}

#[cfg(test)]
mod tests;
