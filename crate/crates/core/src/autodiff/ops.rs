//! Forward kernels and adjoint rules for every recorded operation.
//!
//! Each kernel is a pure function of its input tensors. The adjoint of an op
//! receives the forward inputs, the forward output and the upstream gradient,
//! and returns one gradient per input (or `None` where the input does not
//! need one).

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominators with magnitude below this are rejected by `div`.
pub const DIV_GUARD: f64 = 1e-12;

/// Floor applied to `‖f‖·‖v‖` inside the cosine op.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    /// `[m, k] × [k, n] → [m, n]`.
    MatMul,
    Relu,
    /// Sum of all elements, shape `[1]`.
    Sum,
    Mean,
    /// Concatenation of any number of inputs along `axis`.
    Concat {
        axis: usize,
    },
    Scale(f64),
    Exp,
    Sqrt,
    /// Row-wise softmax of a 2-D tensor.
    SoftmaxRows,
    /// 2-D transpose.
    Transpose,
    /// Input `[C, H, W]`, kernels `[O, C, kh, kw]`, output `[O, H', W']`.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    Reshape(Vec<usize>),
    /// Slice `[start, end)` of the leading axis.
    SliceRows {
        start: usize,
        end: usize,
    },
    /// Adds a vector of length `shape[axis]`, broadcast over every other axis.
    BiasAdd {
        axis: usize,
    },
    /// Normalized cosine similarity of every row of `[M, D]` with a `[D]`
    /// vector: `f·v / (2·max(‖f‖‖v‖, ε)) + 0.5`.
    CosineRows,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Relu => "relu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat { .. } => "concat",
            OpKind::Scale(_) => "scale",
            OpKind::Exp => "exp",
            OpKind::Sqrt => "sqrt",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Reshape(_) => "reshape",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::BiasAdd { .. } => "bias_add",
            OpKind::CosineRows => "cosine_rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::MatMul
            | OpKind::Conv2d { .. }
            | OpKind::BiasAdd { .. }
            | OpKind::CosineRows => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Evaluates `op` on `inputs` without recording anything.
pub fn forward(op: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    match op.arity() {
        Some(n) if inputs.len() != n => {
            return Err(Error::invalid(
                name,
                format!("expected {n} inputs, got {}", inputs.len()),
            ))
        }
        None if inputs.is_empty() => return Err(Error::invalid(name, "no inputs")),
        _ => {}
    }
    match op {
        OpKind::Add => zip_same(name, inputs[0], inputs[1], |a, b| a + b),
        OpKind::Sub => zip_same(name, inputs[0], inputs[1], |a, b| a - b),
        OpKind::Mul => zip_same(name, inputs[0], inputs[1], |a, b| a * b),
        OpKind::Div => {
            let (num, den) = (inputs[0], inputs[1]);
            if num.shape() != den.shape() {
                return Err(Error::shape(name, num.shape(), den.shape()));
            }
            if let Some((index, &value)) = den
                .data()
                .iter()
                .enumerate()
                .find(|(_, v)| v.abs() < DIV_GUARD)
            {
                return Err(Error::ZeroDenominator {
                    op: name,
                    index,
                    value,
                });
            }
            Ok(elementwise(num, den, |a, b| a / b))
        }
        OpKind::MatMul => matmul(inputs[0], inputs[1]),
        OpKind::Relu => Ok(inputs[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        OpKind::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        OpKind::Mean => {
            let x = inputs[0];
            Ok(Tensor::scalar(
                x.data().iter().sum::<f64>() / x.numel() as f64,
            ))
        }
        OpKind::Concat { axis } => concat(*axis, inputs),
        OpKind::Scale(c) => Ok(inputs[0].map(|v| v * c)),
        OpKind::Exp => Ok(inputs[0].map(f64::exp)),
        OpKind::Sqrt => {
            let x = inputs[0];
            if let Some(i) = x.data().iter().position(|&v| v < 0.0) {
                return Err(Error::invalid(
                    name,
                    format!("negative input {} at index {i}", x.data()[i]),
                ));
            }
            Ok(x.map(f64::sqrt))
        }
        OpKind::SoftmaxRows => softmax_rows(inputs[0]),
        OpKind::Transpose => transpose(inputs[0]),
        OpKind::Conv2d { stride, padding } => conv2d(inputs[0], inputs[1], *stride, *padding),
        OpKind::Reshape(shape) => {
            let x = inputs[0];
            let numel: usize = shape.iter().product();
            if numel != x.numel() || shape.contains(&0) {
                return Err(Error::shape(name, x.shape(), shape));
            }
            Ok(Tensor::from_parts(shape.clone(), x.data().to_vec()))
        }
        OpKind::SliceRows { start, end } => slice_rows(inputs[0], *start, *end),
        OpKind::BiasAdd { axis } => bias_add(inputs[0], inputs[1], *axis),
        OpKind::CosineRows => cosine_rows(inputs[0], inputs[1]),
    }
}

/// Gradients of `op` with respect to each input, given the upstream gradient.
/// Inputs whose entry in `needs` is false get `None`.
pub fn adjoint(
    op: &OpKind,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        OpKind::Add => vec![want(0).then(|| grad.clone()), want(1).then(|| grad.clone())],
        OpKind::Sub => vec![
            want(0).then(|| grad.clone()),
            want(1).then(|| grad.map(|g| -g)),
        ],
        OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![
                want(0).then(|| elementwise(grad, b, |g, y| g * y)),
                want(1).then(|| elementwise(grad, a, |g, x| g * x)),
            ]
        }
        OpKind::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![
                want(0).then(|| elementwise(grad, b, |g, y| g / y)),
                want(1).then(|| {
                    let data = grad
                        .data()
                        .iter()
                        .zip(a.data())
                        .zip(b.data())
                        .map(|((g, x), y)| -g * x / (y * y))
                        .collect();
                    Tensor::from_parts(b.shape().to_vec(), data)
                }),
            ]
        }
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![
                want(0).then(|| matmul_nt(grad, b)),
                want(1).then(|| matmul_tn(a, grad)),
            ]
        }
        OpKind::Relu => vec![want(0).then(|| {
            elementwise(grad, inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })
        })],
        OpKind::Sum => {
            let g = grad.data()[0];
            vec![want(0).then(|| Tensor::full(inputs[0].shape(), g))]
        }
        OpKind::Mean => {
            let x = inputs[0];
            let g = grad.data()[0] / x.numel() as f64;
            vec![want(0).then(|| Tensor::full(x.shape(), g))]
        }
        OpKind::Concat { axis } => concat_adjoint(*axis, inputs, grad, needs),
        OpKind::Scale(c) => vec![want(0).then(|| grad.map(|g| g * c))],
        OpKind::Exp => vec![want(0).then(|| elementwise(grad, output, |g, y| g * y))],
        OpKind::Sqrt => vec![want(0).then(|| elementwise(grad, output, |g, y| g / (2.0 * y)))],
        OpKind::SoftmaxRows => vec![want(0).then(|| softmax_rows_adjoint(output, grad))],
        OpKind::Transpose => vec![want(0).then(|| transpose(grad).expect("2-D gradient"))],
        OpKind::Conv2d { stride, padding } => {
            let (gi, gw) = conv2d_adjoint(
                inputs[0],
                inputs[1],
                grad,
                *stride,
                *padding,
                want(0),
                want(1),
            );
            vec![gi, gw]
        }
        OpKind::Reshape(_) => vec![want(0).then(|| {
            Tensor::from_parts(inputs[0].shape().to_vec(), grad.data().to_vec())
        })],
        OpKind::SliceRows { start, end } => vec![want(0).then(|| {
            let x = inputs[0];
            let row: usize = x.shape()[1..].iter().product();
            let mut g = Tensor::zeros(x.shape());
            g.data_mut()[start * row..end * row].copy_from_slice(grad.data());
            g
        })],
        OpKind::BiasAdd { axis } => {
            let (x, bias) = (inputs[0], inputs[1]);
            vec![
                want(0).then(|| grad.clone()),
                want(1).then(|| {
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let mut gb = vec![0.0; len];
                    for o in 0..outer {
                        for (l, slot) in gb.iter_mut().enumerate() {
                            let base = (o * len + l) * inner;
                            *slot += grad.data()[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    Tensor::from_parts(bias.shape().to_vec(), gb)
                }),
            ]
        }
        OpKind::CosineRows => {
            let (gf, gv) = cosine_rows_adjoint(inputs[0], inputs[1], grad, want(0), want(1));
            vec![gf, gv]
        }
    }
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(elementwise(a, b, f))
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(op, format!("expected 2-D input, got {:?}", t.shape()))),
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `G · Bᵀ` for `G: [m, n]`, `B: [k, n]`.
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let (gd, bd) = (g.data(), b.data());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_parts(vec![m, k], out)
}

/// `Aᵀ · G` for `A: [m, k]`, `G: [m, n]`.
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = g.shape()[1];
    let (ad, gd) = (a.data(), g.data());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor::from_parts(vec![k, n], out)
}

fn transpose(x: &Tensor) -> Result<Tensor> {
    let (r, c) = dims2("transpose", x)?;
    let d = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn concat(axis: usize, inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs[0];
    if axis >= first.ndim() {
        return Err(Error::invalid(
            "concat",
            format!("axis {axis} out of range for {:?}", first.shape()),
        ));
    }
    let mut total = 0;
    for t in inputs {
        let compatible = t.ndim() == first.ndim()
            && t
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", first.shape(), t.shape()));
        }
        total += t.shape()[axis];
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

fn concat_adjoint(axis: usize, inputs: &[&Tensor], grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let (outer, total, inner) = split_axis(grad.shape(), axis);
    let mut offset = 0;
    inputs
        .iter()
        .enumerate()
        .map(|(idx, t)| {
            let len = t.shape()[axis];
            let start = offset;
            offset += len;
            if !needs.get(idx).copied().unwrap_or(false) {
                return None;
            }
            let mut data = Vec::with_capacity(t.numel());
            for o in 0..outer {
                let base = (o * total + start) * inner;
                data.extend_from_slice(&grad.data()[base..base + len * inner]);
            }
            Some(Tensor::from_parts(t.shape().to_vec(), data))
        })
        .collect()
}

fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = dims2("softmax_rows", x)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c).take(r) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn softmax_rows_adjoint(y: &Tensor, g: &Tensor) -> Tensor {
    let c = y.shape()[1];
    let mut out = vec![0.0; y.numel()];
    for ((o, yr), gr) in out
        .chunks_mut(c)
        .zip(y.data().chunks(c))
        .zip(g.data().chunks(c))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
            *ov = yv * (gv - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

fn slice_rows(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    if start >= end || end > x.shape()[0] {
        return Err(Error::invalid(
            "slice_rows",
            format!("range {start}..{end} invalid for {:?}", x.shape()),
        ));
    }
    let row: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    Ok(Tensor::from_parts(shape, x.data()[start * row..end * row].to_vec()))
}

fn bias_add(x: &Tensor, bias: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() || bias.ndim() != 1 || bias.numel() != x.shape()[axis] {
        return Err(Error::shape("bias_add", x.shape(), bias.shape()));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for (l, &b) in bias.data().iter().enumerate() {
            let base = (o * len + l) * inner;
            for v in &mut out[base..base + inner] {
                *v += b;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Output spatial size of a convolution, or `None` if it would be empty.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<ConvGeometry> {
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::invalid("conv2d", format!("input must be CHW, got {:?}", x.shape()))),
    };
    let (o, kc, kh, kw) = match *k.shape() {
        [o, kc, kh, kw] => (o, kc, kh, kw),
        _ => return Err(Error::invalid("conv2d", format!("kernels must be OCkk, got {:?}", k.shape()))),
    };
    if kc != c {
        return Err(Error::shape("conv2d", x.shape(), k.shape()));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(ConvGeometry { c, h, w, o, kh, kw, oh, ow }),
        _ => Err(Error::invalid(
            "conv2d",
            format!(
                "zero-size output: input {:?}, kernels {:?}, stride {stride}, padding {padding}",
                x.shape(),
                k.shape()
            ),
        )),
    }
}

/// Range of output indices whose tap `k` lands inside `[0, len)`.
fn valid_range(len: usize, out: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    // index = o*stride + k - padding must satisfy 0 <= index < len
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + padding > k {
        ((len + padding - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// `out[m×n] += a[m×k] · b[k×n]`, each output summed over `k` in ascending order.
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// Unfolds the input into a `[C·kh·kw, oh·ow]` matrix of taps, zero where a
/// tap falls into the padding. With `transposed` the layout is `[oh·ow, C·kh·kw]`.
fn im2col(xd: &[f64], g: &ConvGeometry, stride: usize, padding: usize, transposed: bool) -> Vec<f64> {
    let taps = g.c * g.kh * g.kw;
    let positions = g.oh * g.ow;
    let mut cols = vec![0.0; taps * positions];
    for c in 0..g.c {
        let xin = &xd[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, g.oh, ky, stride, padding);
            for kx in 0..g.kw {
                let t = (c * g.kh + ky) * g.kw + kx;
                let (ox0, ox1) = valid_range(g.w, g.ow, kx, stride, padding);
                for oy in oy0..oy1 {
                    let irow = &xin[(oy * stride + ky - padding) * g.w..];
                    for ox in ox0..ox1 {
                        let v = irow[ox * stride + kx - padding];
                        let p = oy * g.ow + ox;
                        if transposed {
                            cols[p * taps + t] = v;
                        } else {
                            cols[t * positions + p] = v;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adds a `[C·kh·kw, oh·ow]` tap matrix back onto the input positions.
fn col2im(cols: &[f64], g: &ConvGeometry, stride: usize, padding: usize) -> Vec<f64> {
    let positions = g.oh * g.ow;
    let mut gx = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        let gin = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, g.oh, ky, stride, padding);
            for kx in 0..g.kw {
                let t = (c * g.kh + ky) * g.kw + kx;
                let (ox0, ox1) = valid_range(g.w, g.ow, kx, stride, padding);
                let trow = &cols[t * positions..(t + 1) * positions];
                for oy in oy0..oy1 {
                    let base = (oy * stride + ky - padding) * g.w;
                    for ox in ox0..ox1 {
                        gin[base + ox * stride + kx - padding] += trow[oy * g.ow + ox];
                    }
                }
            }
        }
    }
    gx
}

/// Each output element is accumulated over `(channel, ky, kx)` in ascending
/// order starting from zero, the same order as the textbook quadruple loop.
/// Padding taps contribute exact zeros.
fn conv2d(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geometry(x, k, stride, padding)?;
    let taps = g.c * g.kh * g.kw;
    let positions = g.oh * g.ow;
    let cols = im2col(x.data(), &g, stride, padding, false);
    let mut out = vec![0.0; g.o * positions];
    gemm_acc(g.o, taps, positions, k.data(), &cols, &mut out);
    Ok(Tensor::from_parts(vec![g.o, g.oh, g.ow], out))
}

fn conv2d_adjoint(
    x: &Tensor,
    k: &Tensor,
    grad: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let g = conv_geometry(x, k, stride, padding).expect("geometry validated in forward");
    let taps = g.c * g.kh * g.kw;
    let positions = g.oh * g.ow;
    let gd = grad.data();
    let gk = need_kernel.then(|| {
        let cols_t = im2col(x.data(), &g, stride, padding, true);
        let mut gk = vec![0.0; g.o * taps];
        gemm_acc(g.o, positions, taps, gd, &cols_t, &mut gk);
        Tensor::from_parts(k.shape().to_vec(), gk)
    });
    let gx = need_input.then(|| {
        let kd = k.data();
        let mut kt = vec![0.0; taps * g.o];
        for o in 0..g.o {
            for t in 0..taps {
                kt[t * g.o + o] = kd[o * taps + t];
            }
        }
        let mut gcols = vec![0.0; taps * positions];
        gemm_acc(taps, g.o, positions, &kt, gd, &mut gcols);
        Tensor::from_parts(x.shape().to_vec(), col2im(&gcols, &g, stride, padding))
    });
    (gx, gk)
}

fn cosine_operands(f: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    let (m, d) = match *f.shape() {
        [m, d] => (m, d),
        _ => return Err(Error::invalid("cosine_rows", format!("features must be [M, D], got {:?}", f.shape()))),
    };
    if v.ndim() != 1 || v.numel() != d {
        return Err(Error::shape("cosine_rows", f.shape(), v.shape()));
    }
    Ok((m, d))
}

fn cosine_rows(f: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (m, d) = cosine_operands(f, v)?;
    let vn = v.norm();
    let out = f
        .data()
        .chunks(d)
        .take(m)
        .map(|row| {
            let dot: f64 = row.iter().zip(v.data()).map(|(a, b)| a * b).sum();
            let fnorm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            dot / (2.0 * (fnorm * vn).max(COSINE_EPS)) + 0.5
        })
        .collect();
    Ok(Tensor::from_parts(vec![m], out))
}

fn cosine_rows_adjoint(
    f: &Tensor,
    v: &Tensor,
    grad: &Tensor,
    need_f: bool,
    need_v: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let d = v.numel();
    let vd = v.data();
    let vn = v.norm();
    let mut gf = need_f.then(|| vec![0.0; f.numel()]);
    let mut gv = need_v.then(|| vec![0.0; d]);
    for (i, row) in f.data().chunks(d).enumerate() {
        let g = grad.data()[i];
        let dot: f64 = row.iter().zip(vd).map(|(a, b)| a * b).sum();
        let fnorm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        let q = fnorm * vn;
        let active = q > COSINE_EPS;
        let den = q.max(COSINE_EPS);
        // s = dot / (2 den) + 0.5, den = ‖f‖‖v‖ when active
        let a = g / (2.0 * den);
        let b = if active { g * dot / (2.0 * den * den) } else { 0.0 };
        if let Some(gf) = gf.as_mut() {
            let out = &mut gf[i * d..(i + 1) * d];
            let coef = if active { b * vn / fnorm } else { 0.0 };
            for ((o, &fv), &vv) in out.iter_mut().zip(row).zip(vd) {
                *o = a * vv - coef * fv;
            }
        }
        if let Some(gv) = gv.as_mut() {
            let coef = if active { b * fnorm / vn } else { 0.0 };
            for ((o, &fv), &vv) in gv.iter_mut().zip(row).zip(vd) {
                *o += a * fv - coef * vv;
            }
        }
    }
    (
        gf.map(|data| Tensor::from_parts(f.shape().to_vec(), data)),
        gv.map(|data| Tensor::from_parts(v.shape().to_vec(), data)),
    )
}
