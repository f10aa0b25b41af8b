//! Vector-Jacobian products for every primitive.
//!
//! VJPs are written in terms of the primitives themselves, so running them
//! on attached tensors records a differentiable gradient graph — that is the
//! whole second-order story. Piecewise-constant factors (relu/leaky masks,
//! argmax selections) enter as detached constants, making their second
//! derivative zero almost everywhere.

use super::op::{self, Op};
use super::{sum_to_shape, Tensor};
use crate::error::Result;

/// Gradient contributions for each input of `op`, aligned with `inputs`.
/// `needed[i]` is `Some` when input `i` has a node that wants a gradient.
pub(crate) fn vjp(
    op: &Op,
    inputs: &[Tensor],
    output: &Tensor,
    g: &Tensor,
    needed: &[Option<usize>],
) -> Result<Vec<Option<Tensor>>> {
    let need = |i: usize| needed[i].is_some();
    let mut out: Vec<Option<Tensor>> = vec![None; inputs.len()];
    match op {
        Op::Leaf => {}
        Op::Add => {
            if need(0) {
                out[0] = Some(sum_to_shape(g, inputs[0].shape())?);
            }
            if need(1) {
                out[1] = Some(sum_to_shape(g, inputs[1].shape())?);
            }
        }
        Op::Sub => {
            if need(0) {
                out[0] = Some(sum_to_shape(g, inputs[0].shape())?);
            }
            if need(1) {
                out[1] = Some(sum_to_shape(&g.neg()?, inputs[1].shape())?);
            }
        }
        Op::Mul => {
            if need(0) {
                out[0] = Some(sum_to_shape(&g.mul(&inputs[1])?, inputs[0].shape())?);
            }
            if need(1) {
                out[1] = Some(sum_to_shape(&g.mul(&inputs[0])?, inputs[1].shape())?);
            }
        }
        Op::Div => {
            if need(0) {
                out[0] = Some(sum_to_shape(&g.div(&inputs[1])?, inputs[0].shape())?);
            }
            if need(1) {
                // d(a/b)/db = -a/b^2 = -y/b
                let db = g.mul(output)?.div(&inputs[1])?.neg()?;
                out[1] = Some(sum_to_shape(&db, inputs[1].shape())?);
            }
        }
        Op::AddScalar(_) => {
            if need(0) {
                out[0] = Some(g.clone());
            }
        }
        Op::MulScalar(c) => {
            if need(0) {
                out[0] = Some(g.mul_scalar(*c)?);
            }
        }
        Op::PowScalar(k) => {
            if need(0) {
                out[0] = Some(g.mul(&inputs[0].pow_scalar(k - 1.0)?)?.mul_scalar(*k)?);
            }
        }
        Op::Exp => {
            if need(0) {
                out[0] = Some(g.mul(output)?);
            }
        }
        Op::Log => {
            if need(0) {
                out[0] = Some(g.div(&inputs[0])?);
            }
        }
        Op::Tanh => {
            if need(0) {
                let one_minus_sq = output.mul(output)?.neg()?.add_scalar(1.0)?;
                out[0] = Some(g.mul(&one_minus_sq)?);
            }
        }
        Op::Relu => {
            if need(0) {
                let mask = inputs[0].map_detached(|x| if x > 0.0 { 1.0 } else { 0.0 });
                out[0] = Some(g.mul(&mask)?);
            }
        }
        Op::LeakyRelu(slope) => {
            if need(0) {
                let s = *slope;
                let mask = inputs[0].map_detached(|x| if x > 0.0 { 1.0 } else { s });
                out[0] = Some(g.mul(&mask)?);
            }
        }
        Op::Matmul => {
            if need(0) {
                out[0] = Some(g.matmul(&inputs[1].transpose()?)?);
            }
            if need(1) {
                out[1] = Some(inputs[0].transpose()?.matmul(g)?);
            }
        }
        Op::Transpose => {
            if need(0) {
                out[0] = Some(g.transpose()?);
            }
        }
        Op::SumAxes { axes, keep } => {
            if need(0) {
                let kept = op::reduced_shape(inputs[0].shape(), axes, true);
                let gk = if *keep { g.clone() } else { g.reshape(&kept)? };
                out[0] = Some(gk.broadcast_to(inputs[0].shape())?);
            }
        }
        Op::MaxAxes { axes, keep } => {
            if need(0) {
                let (_, argmax) = op::eval_max_axes((inputs[0].data(), inputs[0].shape()), axes, *keep)?;
                let mut mask = vec![0.0; inputs[0].numel()];
                for flat in argmax {
                    mask[flat] = 1.0;
                }
                let mask = Tensor::from_vec(mask, inputs[0].shape());
                let kept = op::reduced_shape(inputs[0].shape(), axes, true);
                let gk = if *keep { g.clone() } else { g.reshape(&kept)? };
                out[0] = Some(gk.broadcast_to(inputs[0].shape())?.mul(&mask)?);
            }
        }
        Op::Reshape { .. } => {
            if need(0) {
                out[0] = Some(g.reshape(inputs[0].shape())?);
            }
        }
        Op::BroadcastTo { .. } => {
            if need(0) {
                out[0] = Some(sum_to_shape(g, inputs[0].shape())?);
            }
        }
        Op::Concat { axis } => {
            let mut off = 0;
            for (i, input) in inputs.iter().enumerate() {
                let len = input.shape()[*axis];
                if need(i) {
                    out[i] = Some(g.slice(*axis, off, len)?);
                }
                off += len;
            }
        }
        Op::Slice { axis, start, len } => {
            if need(0) {
                let ext = inputs[0].shape()[*axis];
                let mut parts: Vec<Tensor> = Vec::new();
                if *start > 0 {
                    let mut s = inputs[0].shape().to_vec();
                    s[*axis] = *start;
                    parts.push(Tensor::zeros(&s));
                }
                parts.push(g.clone());
                if start + len < ext {
                    let mut s = inputs[0].shape().to_vec();
                    s[*axis] = ext - start - len;
                    parts.push(Tensor::zeros(&s));
                }
                let refs: Vec<&Tensor> = parts.iter().collect();
                out[0] = Some(Tensor::concat(&refs, *axis)?);
            }
        }
        Op::Conv2d { stride, pad } => {
            if need(0) {
                let s = inputs[0].shape();
                out[0] = Some(Tensor::conv2d_bwd_input(g, &inputs[1], *stride, *pad, s[2], s[3])?);
            }
            if need(1) {
                let k = inputs[1].shape();
                out[1] = Some(Tensor::conv2d_bwd_kernel(g, &inputs[0], *stride, *pad, k[2], k[3])?);
            }
        }
        Op::ConvBwdInput { stride, pad, .. } => {
            // y = A_w^T g0 ; d/d g0 = conv(u, w), d/d w = conv_bwd_kernel(g0, u)
            if need(0) {
                out[0] = Some(g.conv2d(&inputs[1], *stride, *pad)?);
            }
            if need(1) {
                let k = inputs[1].shape();
                out[1] = Some(Tensor::conv2d_bwd_kernel(&inputs[0], g, *stride, *pad, k[2], k[3])?);
            }
        }
        Op::ConvBwdKernel { stride, pad, .. } => {
            // y = B_x^T g0 ; d/d g0 = conv(x, u), d/d x = conv_bwd_input(g0, u)
            if need(0) {
                out[0] = Some(inputs[1].conv2d(g, *stride, *pad)?);
            }
            if need(1) {
                let xs = inputs[1].shape();
                out[1] = Some(Tensor::conv2d_bwd_input(&inputs[0], g, *stride, *pad, xs[2], xs[3])?);
            }
        }
        Op::UpsampleNn2x => {
            if need(0) {
                out[0] = Some(g.downsample_sum_2x()?);
            }
        }
        Op::DownsampleSum2x => {
            if need(0) {
                out[0] = Some(g.upsample_nn_2x()?);
            }
        }
    }
    Ok(out)
}
