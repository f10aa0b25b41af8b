//! Primitive operations: shape inference and forward kernels.
//!
//! Kernels are pure functions over row-major `f64` buffers. Larger kernels
//! (convolution, matmul) parallelize over independent output chunks, which
//! keeps results bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work threshold below which kernels stay single-threaded.
const PAR_MIN_WORK: usize = 1 << 15;

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    PowScalar(f64),
    Exp,
    Log,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Matmul,
    Transpose,
    SumAxes { axes: Vec<usize>, keep: bool },
    MaxAxes { axes: Vec<usize>, keep: bool },
    Reshape { shape: Vec<usize> },
    BroadcastTo { shape: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Conv2d { stride: usize, pad: usize },
    ConvBwdInput { stride: usize, pad: usize, in_h: usize, in_w: usize },
    ConvBwdKernel { stride: usize, pad: usize, kh: usize, kw: usize },
    UpsampleNn2x,
    DownsampleSum2x,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::PowScalar(_) => "pow_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::SumAxes { .. } => "sum_axes",
            Op::MaxAxes { .. } => "max_axes",
            Op::Reshape { .. } => "reshape",
            Op::BroadcastTo { .. } => "broadcast_to",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvBwdInput { .. } => "conv2d_bwd_input",
            Op::ConvBwdKernel { .. } => "conv2d_bwd_kernel",
            Op::UpsampleNn2x => "upsample_nn_2x",
            Op::DownsampleSum2x => "downsample_sum_2x",
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// Broadcast two shapes with trailing-axis alignment and size-1 expansion.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}")));
        }
    }
    Ok(out)
}

/// Per-dimension read strides for iterating `in_shape` as if broadcast to
/// `out_shape` (stride 0 on expanded dims).
fn bcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides_of(in_shape);
    let mut out = vec![0; rank];
    for d in 0..rank {
        if d >= offset && in_shape[d - offset] == out_shape[d] && out_shape[d] != 0 {
            out[d] = in_strides[d - offset];
        } else {
            out[d] = 0; // broadcast (size-1) dimension
        }
    }
    out
}

fn binary_broadcast(
    op: &'static str,
    a: &[f64],
    ashape: &[usize],
    b: &[f64],
    bshape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if ashape == bshape {
        let out = a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        return Ok((out, ashape.to_vec()));
    }
    let out_shape = broadcast_shape(op, ashape, bshape)?;
    let n = numel(&out_shape);
    let rank = out_shape.len();
    let sa = bcast_strides(ashape, &out_shape);
    let sb = bcast_strides(bshape, &out_shape);
    let mut out = vec![0.0; n];
    let mut counters = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for slot in out.iter_mut() {
        *slot = f(a[ia], b[ib]);
        for d in (0..rank).rev() {
            counters[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counters[d] == out_shape[d] {
                counters[d] = 0;
                ia -= sa[d] * out_shape[d];
                ib -= sb[d] * out_shape[d];
            } else {
                break;
            }
        }
    }
    Ok((out, out_shape))
}

fn expand_to(data: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let n = numel(out_shape);
    let rank = out_shape.len();
    let s = bcast_strides(in_shape, out_shape);
    let mut out = vec![0.0; n];
    let mut counters = vec![0usize; rank];
    let mut ia = 0usize;
    for slot in out.iter_mut() {
        *slot = data[ia];
        for d in (0..rank).rev() {
            counters[d] += 1;
            ia += s[d];
            if counters[d] == out_shape[d] {
                counters[d] = 0;
                ia -= s[d] * out_shape[d];
            } else {
                break;
            }
        }
    }
    out
}

fn check_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() {
        return Err(Error::invalid(format!("{op}: duplicate reduction axes {axes:?}")));
    }
    for &ax in &sorted {
        if ax >= rank {
            return Err(Error::InvalidAxis { op, axis: ax, rank });
        }
    }
    Ok(sorted)
}

/// Shape left after reducing `axes` with keepdims.
pub fn reduced_shape(shape: &[usize], axes: &[usize], keep: bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(shape.len());
    for (d, &ext) in shape.iter().enumerate() {
        if axes.contains(&d) {
            if keep {
                out.push(1);
            }
        } else {
            out.push(ext);
        }
    }
    out
}

/// Valid output coordinate range along one spatial dimension such that the
/// corresponding input coordinate `o*stride + k_off - pad` lies in bounds.
fn conv_range(pad: usize, k_off: usize, stride: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_size + pad > k_off {
        (((in_size - 1 + pad - k_off) / stride) + 1).min(out_size)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub struct EvalOut {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

type In<'a> = (&'a [f64], &'a [usize]);

impl Op {
    /// Forward evaluation. Inputs are (data, shape) pairs.
    pub fn eval(&self, inputs: &[In]) -> Result<EvalOut> {
        match self {
            Op::Leaf => unreachable!("leaf entries are never evaluated"),
            Op::Add => {
                let (data, shape) = binary_broadcast("add", inputs[0].0, inputs[0].1, inputs[1].0, inputs[1].1, |x, y| x + y)?;
                Ok(EvalOut { data, shape })
            }
            Op::Sub => {
                let (data, shape) = binary_broadcast("sub", inputs[0].0, inputs[0].1, inputs[1].0, inputs[1].1, |x, y| x - y)?;
                Ok(EvalOut { data, shape })
            }
            Op::Mul => {
                let (data, shape) = binary_broadcast("mul", inputs[0].0, inputs[0].1, inputs[1].0, inputs[1].1, |x, y| x * y)?;
                Ok(EvalOut { data, shape })
            }
            Op::Div => {
                let (data, shape) = binary_broadcast("div", inputs[0].0, inputs[0].1, inputs[1].0, inputs[1].1, |x, y| x / y)?;
                Ok(EvalOut { data, shape })
            }
            Op::AddScalar(c) => Ok(unary(inputs[0], |x| x + c)),
            Op::MulScalar(c) => Ok(unary(inputs[0], |x| x * c)),
            Op::PowScalar(k) => Ok(unary(inputs[0], |x| x.powf(*k))),
            Op::Exp => Ok(unary(inputs[0], f64::exp)),
            Op::Log => Ok(unary(inputs[0], f64::ln)),
            Op::Tanh => Ok(unary(inputs[0], f64::tanh)),
            Op::Relu => Ok(unary(inputs[0], |x| if x > 0.0 { x } else { 0.0 })),
            Op::LeakyRelu(slope) => Ok(unary(inputs[0], |x| if x > 0.0 { x } else { slope * x })),
            Op::Matmul => eval_matmul(inputs[0], inputs[1]),
            Op::Transpose => eval_transpose(inputs[0]),
            Op::SumAxes { axes, keep } => eval_sum_axes(inputs[0], axes, *keep),
            Op::MaxAxes { axes, keep } => {
                let (out, _) = eval_max_axes(inputs[0], axes, *keep)?;
                Ok(out)
            }
            Op::Reshape { shape } => {
                let (data, in_shape) = inputs[0];
                if numel(shape) != data.len() {
                    return Err(shape_err(
                        "reshape",
                        format!("cannot reshape {in_shape:?} ({} elements) to {shape:?}", data.len()),
                    ));
                }
                Ok(EvalOut { data: data.to_vec(), shape: shape.clone() })
            }
            Op::BroadcastTo { shape } => {
                let (data, in_shape) = inputs[0];
                let merged = broadcast_shape("broadcast_to", in_shape, shape)?;
                if &merged != shape {
                    return Err(shape_err(
                        "broadcast_to",
                        format!("cannot broadcast {in_shape:?} to {shape:?}"),
                    ));
                }
                Ok(EvalOut { data: expand_to(data, in_shape, shape), shape: shape.clone() })
            }
            Op::Concat { axis } => eval_concat(inputs, *axis),
            Op::Slice { axis, start, len } => eval_slice(inputs[0], *axis, *start, *len),
            Op::Conv2d { stride, pad } => eval_conv2d(inputs[0], inputs[1], *stride, *pad),
            Op::ConvBwdInput { stride, pad, in_h, in_w } => {
                eval_conv_bwd_input(inputs[0], inputs[1], *stride, *pad, *in_h, *in_w)
            }
            Op::ConvBwdKernel { stride, pad, kh, kw } => {
                eval_conv_bwd_kernel(inputs[0], inputs[1], *stride, *pad, *kh, *kw)
            }
            Op::UpsampleNn2x => eval_upsample(inputs[0]),
            Op::DownsampleSum2x => eval_downsample(inputs[0]),
        }
    }
}

fn unary(input: In, f: impl Fn(f64) -> f64) -> EvalOut {
    EvalOut {
        data: input.0.iter().map(|&x| f(x)).collect(),
        shape: input.1.to_vec(),
    }
}

fn eval_matmul(a: In, b: In) -> Result<EvalOut> {
    let (adata, ashape) = a;
    let (bdata, bshape) = b;
    if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
        return Err(shape_err("matmul", format!("expected [m,k]x[k,n], got {ashape:?} x {bshape:?}")));
    }
    let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
    let mut out = vec![0.0; m * n];
    let row_job = |i: usize, row: &mut [f64]| {
        for p in 0..k {
            let av = adata[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bdata[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * n * k >= PAR_MIN_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    Ok(EvalOut { data: out, shape: vec![m, n] })
}

fn eval_transpose(a: In) -> Result<EvalOut> {
    let (data, shape) = a;
    if shape.len() != 2 {
        return Err(shape_err("transpose", format!("expected rank 2, got {shape:?}")));
    }
    let (m, n) = (shape[0], shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    Ok(EvalOut { data: out, shape: vec![n, m] })
}

fn eval_sum_axes(input: In, axes: &[usize], keep: bool) -> Result<EvalOut> {
    let (data, shape) = input;
    let axes = check_axes("sum_axes", axes, shape.len())?;
    let out_shape = reduced_shape(shape, &axes, keep);
    let kept = reduced_shape(shape, &axes, true);
    let mut out = vec![0.0; numel(&out_shape)];
    // Walk the input once; the output offset uses stride 0 on reduced dims.
    let s = bcast_strides(&kept, shape);
    let rank = shape.len();
    let mut counters = vec![0usize; rank];
    let mut io = 0usize;
    for &v in data {
        out[io] += v;
        for d in (0..rank).rev() {
            counters[d] += 1;
            io += s[d];
            if counters[d] == shape[d] {
                counters[d] = 0;
                io -= s[d] * shape[d];
            } else {
                break;
            }
        }
    }
    Ok(EvalOut { data: out, shape: out_shape })
}

/// Max reduction. Also returns the flat input index of the attaining element
/// per output cell (first in row-major order on ties).
pub fn eval_max_axes(input: In, axes: &[usize], keep: bool) -> Result<(EvalOut, Vec<usize>)> {
    let (data, shape) = input;
    let axes = check_axes("max_axes", axes, shape.len())?;
    for &ax in &axes {
        if shape[ax] == 0 {
            return Err(Error::invalid(format!("max_axes: empty axis {ax}")));
        }
    }
    let out_shape = reduced_shape(shape, &axes, keep);
    let kept = reduced_shape(shape, &axes, true);
    let n_out = numel(&out_shape);
    let mut out = vec![f64::NEG_INFINITY; n_out];
    let mut argmax = vec![usize::MAX; n_out];
    let s = bcast_strides(&kept, shape);
    let rank = shape.len();
    let mut counters = vec![0usize; rank];
    let mut io = 0usize;
    for (flat, &v) in data.iter().enumerate() {
        if v > out[io] {
            out[io] = v;
            argmax[io] = flat;
        }
        for d in (0..rank).rev() {
            counters[d] += 1;
            io += s[d];
            if counters[d] == shape[d] {
                counters[d] = 0;
                io -= s[d] * shape[d];
            } else {
                break;
            }
        }
    }
    Ok((EvalOut { data: out, shape: out_shape }, argmax))
}

fn eval_concat(inputs: &[In], axis: usize) -> Result<EvalOut> {
    if inputs.is_empty() {
        return Err(Error::invalid("concat: no inputs".to_string()));
    }
    let rank = inputs[0].1.len();
    if axis >= rank {
        return Err(Error::InvalidAxis { op: "concat", axis, rank });
    }
    let mut out_shape = inputs[0].1.to_vec();
    out_shape[axis] = 0;
    for (_, shape) in inputs {
        if shape.len() != rank {
            return Err(shape_err("concat", format!("rank mismatch: {:?} vs {shape:?}", inputs[0].1)));
        }
        for d in 0..rank {
            if d != axis && shape[d] != inputs[0].1[d] {
                return Err(shape_err("concat", format!("incompatible shapes {:?} vs {shape:?} on axis {d}", inputs[0].1)));
            }
        }
        out_shape[axis] += shape[axis];
    }
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = vec![0.0; numel(&out_shape)];
    let out_block = out_shape[axis] * inner;
    for o in 0..outer {
        let mut off = 0;
        for (data, shape) in inputs {
            let block = shape[axis] * inner;
            let src = &data[o * block..(o + 1) * block];
            out[o * out_block + off..o * out_block + off + block].copy_from_slice(src);
            off += block;
        }
    }
    Ok(EvalOut { data: out, shape: out_shape })
}

fn eval_slice(input: In, axis: usize, start: usize, len: usize) -> Result<EvalOut> {
    let (data, shape) = input;
    let rank = shape.len();
    if axis >= rank {
        return Err(Error::InvalidAxis { op: "slice", axis, rank });
    }
    if start + len > shape[axis] {
        return Err(shape_err("slice", format!("range {start}..{} out of bounds for axis {axis} of {shape:?}", start + len)));
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let in_block = shape[axis] * inner;
    let out_block = len * inner;
    let mut out = vec![0.0; numel(&out_shape)];
    for o in 0..outer {
        let src = &data[o * in_block + start * inner..o * in_block + (start + len) * inner];
        out[o * out_block..(o + 1) * out_block].copy_from_slice(src);
    }
    Ok(EvalOut { data: out, shape: out_shape })
}

#[allow(clippy::type_complexity)]
fn conv_shapes(op: &'static str, xshape: &[usize], kshape: &[usize], stride: usize, pad: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if xshape.len() != 4 || kshape.len() != 4 {
        return Err(shape_err(op, format!("expected NCHW input and OIHW kernel, got {xshape:?} and {kshape:?}")));
    }
    let (n, cin, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (cout, kcin, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if cin != kcin {
        return Err(shape_err(op, format!("input channels {cin} != kernel channels {kcin}")));
    }
    if stride == 0 {
        return Err(Error::invalid(format!("{op}: stride must be >= 1")));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err(op, format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})")));
    }
    Ok((n, cin, h, w, cout, kh, kw))
}

fn eval_conv2d(x: In, k: In, stride: usize, pad: usize) -> Result<EvalOut> {
    let (xdata, xshape) = x;
    let (kdata, kshape) = k;
    let (n, cin, h, w, cout, kh, kw) = conv_shapes("conv2d", xshape, kshape, stride, pad)?;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    let plane = ho * wo;
    let fill = |idx: usize, dst: &mut [f64]| {
        let (ni, co) = (idx / cout, idx % cout);
        let xbase = ni * cin * h * w;
        let kbase = co * cin * kh * kw;
        for ci in 0..cin {
            let xp = &xdata[xbase + ci * h * w..xbase + (ci + 1) * h * w];
            for u in 0..kh {
                let (oh_lo, oh_hi) = conv_range(pad, u, stride, h, ho);
                for v in 0..kw {
                    let wgt = kdata[kbase + ci * kh * kw + u * kw + v];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (ow_lo, ow_hi) = conv_range(pad, v, stride, w, wo);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + u - pad;
                        let xrow = ih * w;
                        let orow = oh * wo;
                        let mut iw = ow_lo * stride + v - pad;
                        for ow in ow_lo..ow_hi {
                            dst[orow + ow] += xp[xrow + iw] * wgt;
                            iw += stride;
                        }
                    }
                }
            }
        }
    };
    run_planes(&mut out, plane, n * cout * cin * kh * kw * plane, fill);
    Ok(EvalOut { data: out, shape: vec![n, cout, ho, wo] })
}

fn eval_conv_bwd_input(g: In, k: In, stride: usize, pad: usize, in_h: usize, in_w: usize) -> Result<EvalOut> {
    let (gdata, gshape) = g;
    let (kdata, kshape) = k;
    if gshape.len() != 4 || kshape.len() != 4 {
        return Err(shape_err("conv2d_bwd_input", format!("expected NCHW grad and OIHW kernel, got {gshape:?} and {kshape:?}")));
    }
    let (n, cout, ho, wo) = (gshape[0], gshape[1], gshape[2], gshape[3]);
    let (kcout, cin, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if cout != kcout {
        return Err(shape_err("conv2d_bwd_input", format!("grad channels {cout} != kernel output channels {kcout}")));
    }
    if (in_h + 2 * pad - kh) / stride + 1 != ho || (in_w + 2 * pad - kw) / stride + 1 != wo {
        return Err(shape_err("conv2d_bwd_input", format!("grad {ho}x{wo} inconsistent with input {in_h}x{in_w}, kernel {kh}x{kw}, stride {stride}, pad {pad}")));
    }
    let mut out = vec![0.0; n * cin * in_h * in_w];
    let plane = in_h * in_w;
    let fill = |idx: usize, dst: &mut [f64]| {
        let (ni, ci) = (idx / cin, idx % cin);
        let gbase = ni * cout * ho * wo;
        for co in 0..cout {
            let gp = &gdata[gbase + co * ho * wo..gbase + (co + 1) * ho * wo];
            let kbase = co * cin * kh * kw + ci * kh * kw;
            for u in 0..kh {
                let (oh_lo, oh_hi) = conv_range(pad, u, stride, in_h, ho);
                for v in 0..kw {
                    let wgt = kdata[kbase + u * kw + v];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (ow_lo, ow_hi) = conv_range(pad, v, stride, in_w, wo);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + u - pad;
                        let xrow = ih * in_w;
                        let orow = oh * wo;
                        let mut iw = ow_lo * stride + v - pad;
                        for ow in ow_lo..ow_hi {
                            dst[xrow + iw] += gp[orow + ow] * wgt;
                            iw += stride;
                        }
                    }
                }
            }
        }
    };
    run_planes(&mut out, plane, n * cout * cin * kh * kw * ho * wo, fill);
    Ok(EvalOut { data: out, shape: vec![n, cin, in_h, in_w] })
}

fn eval_conv_bwd_kernel(g: In, x: In, stride: usize, pad: usize, kh: usize, kw: usize) -> Result<EvalOut> {
    let (gdata, gshape) = g;
    let (xdata, xshape) = x;
    if gshape.len() != 4 || xshape.len() != 4 {
        return Err(shape_err("conv2d_bwd_kernel", format!("expected NCHW tensors, got {gshape:?} and {xshape:?}")));
    }
    let (n, cout, ho, wo) = (gshape[0], gshape[1], gshape[2], gshape[3]);
    let (xn, cin, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    if n != xn {
        return Err(shape_err("conv2d_bwd_kernel", format!("batch mismatch {n} vs {xn}")));
    }
    if (h + 2 * pad - kh) / stride + 1 != ho || (w + 2 * pad - kw) / stride + 1 != wo {
        return Err(shape_err("conv2d_bwd_kernel", format!("grad {ho}x{wo} inconsistent with input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}")));
    }
    let mut out = vec![0.0; cout * cin * kh * kw];
    let plane = kh * kw;
    let fill = |idx: usize, dst: &mut [f64]| {
        let (co, ci) = (idx / cin, idx % cin);
        for u in 0..kh {
            let (oh_lo, oh_hi) = conv_range(pad, u, stride, h, ho);
            for v in 0..kw {
                let (ow_lo, ow_hi) = conv_range(pad, v, stride, w, wo);
                let mut acc = 0.0;
                for ni in 0..n {
                    let gp = &gdata[(ni * cout + co) * ho * wo..(ni * cout + co + 1) * ho * wo];
                    let xp = &xdata[(ni * cin + ci) * h * w..(ni * cin + ci + 1) * h * w];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + u - pad;
                        let xrow = ih * w;
                        let orow = oh * wo;
                        let mut iw = ow_lo * stride + v - pad;
                        for ow in ow_lo..ow_hi {
                            acc += gp[orow + ow] * xp[xrow + iw];
                            iw += stride;
                        }
                    }
                }
                dst[u * kw + v] = acc;
            }
        }
    };
    run_planes(&mut out, plane, n * cout * cin * kh * kw * ho * wo, fill);
    Ok(EvalOut { data: out, shape: vec![cout, cin, kh, kw] })
}

fn run_planes(out: &mut [f64], plane: usize, work: usize, fill: impl Fn(usize, &mut [f64]) + Sync) {
    if work >= PAR_MIN_WORK && out.len() > plane {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, chunk)| fill(i, chunk));
    } else {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            fill(i, chunk);
        }
    }
}

fn eval_upsample(x: In) -> Result<EvalOut> {
    let (data, shape) = x;
    if shape.len() != 4 {
        return Err(shape_err("upsample_nn_2x", format!("expected NCHW, got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (h2, w2) = (h * 2, w * 2);
    let mut out = vec![0.0; n * c * h2 * w2];
    for plane in 0..n * c {
        let src = &data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for i in 0..h {
            for j in 0..w {
                let v = src[i * w + j];
                let base = (2 * i) * w2 + 2 * j;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + w2] = v;
                dst[base + w2 + 1] = v;
            }
        }
    }
    Ok(EvalOut { data: out, shape: vec![n, c, h2, w2] })
}

fn eval_downsample(x: In) -> Result<EvalOut> {
    let (data, shape) = x;
    if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
        return Err(shape_err("downsample_sum_2x", format!("expected NCHW with even spatial dims, got {shape:?}")));
    }
    let (n, c, h2, w2) = (shape[0], shape[1], shape[2], shape[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &data[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let base = (2 * i) * w2 + 2 * j;
                dst[i * w + j] = src[base] + src[base + 1] + src[base + w2] + src[base + w2 + 1];
            }
        }
    }
    Ok(EvalOut { data: out, shape: vec![n, c, h, w] })
}
