//! Differentiable operations recorded on a [`Tape`].
//!
//! Binary elementwise ops accept either equal shapes or a single-element
//! right operand, which is broadcast. Nothing else broadcasts.

use super::kernels::{col2im, gemm, im2col, window_out, ConvGeom};
use super::tape::Node;
use super::{Element, Tensor, Var};
use crate::error::{Error, Result};

/// Input, gamma, beta, channel count and spatial size of a batch-norm call.
type BnInputs<T> = (Tensor<T>, Tensor<T>, Tensor<T>, usize, usize);

pub(crate) enum Op<T: Element> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Pow(f64),
    AddScalar,
    MulScalar(f64),
    Tanh,
    Relu,
    Softplus,
    Mish,
    Clamp { lo: f64, hi: f64 },
    Matmul { m: usize, k: usize, n: usize },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Max { argmax: Vec<usize> },
    Reshape,
    Softmax { cols: usize },
    Pick { targets: Vec<usize>, cols: usize },
    Linear { batch: usize, in_f: usize, out_f: usize },
    Conv2d { geom: ConvGeom, cols: Vec<T> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, train: bool, channels: usize, hw: usize },
    MaxPool { argmax: Vec<usize> },
    GlobalAvgPool { hw: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `max(x, 0) + ln(1 + e^{-|x|})`, finite for every finite `x`.
#[inline]
pub(crate) fn softplus_scalar<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn mish_scalar<T: Element>(x: T) -> T {
    x * softplus_scalar(x).tanh()
}

#[inline]
fn mish_grad_scalar<T: Element>(x: T) -> T {
    let t = softplus_scalar(x).tanh();
    t + x * (T::one() - t * t) * sigmoid(x)
}

/// Split `shape` around `axis` into (outer, extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn map_tensor<T: Element>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(x.shape(), x.data().iter().map(|&v| f(v)).collect(), false)
}

impl<T: Element> Op<T> {
    /// Vector-Jacobian products for each input of `node`, given the upstream
    /// gradient `g`. Entries are `None` for inputs that need no gradient.
    pub(crate) fn backward(&self, node: &Node<T>, g: &[T], nodes: &[Node<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let input = |i: usize| nodes[node.inputs[i]].value.data();
        let out = node.value.data();
        let unary =
            |f: &dyn Fn(usize) -> T| -> Vec<Option<Vec<T>>> { vec![Some((0..g.len()).map(|i| g[i] * f(i)).collect())] };
        match self {
            Op::Leaf => Vec::new(),
            Op::Add | Op::Sub => {
                let sign = if matches!(self, Op::Sub) { -T::one() } else { T::one() };
                let gb = needs[1].then(|| {
                    if input(1).len() == 1 && g.len() != 1 {
                        vec![sign * g.iter().copied().sum::<T>()]
                    } else {
                        g.iter().map(|&v| sign * v).collect()
                    }
                });
                vec![needs[0].then(|| g.to_vec()), gb]
            }
            Op::Mul | Op::Div => {
                let a = input(0);
                let b = input(1);
                let bval = |i: usize| if b.len() == 1 { b[0] } else { b[i] };
                let div = matches!(self, Op::Div);
                let ga =
                    needs[0].then(|| (0..g.len()).map(|i| if div { g[i] / bval(i) } else { g[i] * bval(i) }).collect());
                let gb = needs[1].then(|| {
                    let per: Vec<T> = (0..g.len())
                        .map(|i| {
                            let bi = bval(i);
                            if div {
                                -g[i] * a[i] / (bi * bi)
                            } else {
                                g[i] * a[i]
                            }
                        })
                        .collect();
                    if b.len() == 1 && per.len() != 1 {
                        vec![per.into_iter().sum()]
                    } else {
                        per
                    }
                });
                vec![ga, gb]
            }
            Op::Neg => unary(&|_| -T::one()),
            Op::Exp => unary(&|i| out[i]),
            Op::Ln => {
                let x = input(0);
                unary(&|i| T::one() / x[i])
            }
            Op::Pow(p) => {
                let x = input(0);
                let p = T::from_f64(*p);
                unary(&|i| p * x[i].powf(p - T::one()))
            }
            Op::AddScalar => vec![Some(g.to_vec())],
            Op::MulScalar(s) => {
                let s = T::from_f64(*s);
                unary(&|_| s)
            }
            Op::Tanh => unary(&|i| T::one() - out[i] * out[i]),
            Op::Relu => {
                let x = input(0);
                unary(&|i| if x[i] > T::zero() { T::one() } else { T::zero() })
            }
            Op::Softplus => {
                let x = input(0);
                unary(&|i| sigmoid(x[i]))
            }
            Op::Mish => {
                let x = input(0);
                unary(&|i| mish_grad_scalar(x[i]))
            }
            Op::Clamp { lo, hi } => {
                let x = input(0);
                let (lo, hi) = (T::from_f64(*lo), T::from_f64(*hi));
                unary(&|i| if x[i] >= lo && x[i] <= hi { T::one() } else { T::zero() })
            }
            Op::Matmul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let ga = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, input(1), true, &mut d, false);
                    d
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    gemm(k, m, n, input(0), true, g, false, &mut d, false);
                    d
                });
                vec![ga, gb]
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                let shape = nodes[node.inputs[0]].value.shape();
                let n_in: usize = shape.iter().product();
                let mean = matches!(self, Op::Mean { .. });
                let d = match axis {
                    None => {
                        let v = if mean { g[0] / T::from_f64(n_in as f64) } else { g[0] };
                        vec![v; n_in]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(shape, *ax);
                        let scale = if mean { T::one() / T::from_f64(len as f64) } else { T::one() };
                        let mut d = vec![T::zero(); n_in];
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    d[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        d
                    }
                };
                vec![Some(d)]
            }
            Op::Max { argmax } => {
                let mut d = vec![T::zero(); input(0).len()];
                for (j, &src) in argmax.iter().enumerate() {
                    d[src] += g[j];
                }
                vec![Some(d)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Softmax { cols } => {
                let mut d = vec![T::zero(); g.len()];
                for ((drow, grow), yrow) in d.chunks_mut(*cols).zip(g.chunks(*cols)).zip(out.chunks(*cols)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = yv * (gv - dot);
                    }
                }
                vec![Some(d)]
            }
            Op::Pick { targets, cols } => {
                let mut d = vec![T::zero(); targets.len() * cols];
                for (row, &t) in targets.iter().enumerate() {
                    d[row * cols + t] = g[row];
                }
                vec![Some(d)]
            }
            Op::Linear { batch, in_f, out_f } => {
                let (b, i, o) = (*batch, *in_f, *out_f);
                let gx = needs[0].then(|| {
                    let mut d = vec![T::zero(); b * i];
                    gemm(b, o, i, g, false, input(1), false, &mut d, false);
                    d
                });
                let gw = needs[1].then(|| {
                    let mut d = vec![T::zero(); o * i];
                    gemm(o, b, i, g, true, input(0), false, &mut d, false);
                    d
                });
                let mut grads = vec![gx, gw];
                if node.inputs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut d = vec![T::zero(); o];
                        for row in g.chunks(o) {
                            d.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                        d
                    }));
                }
                grads
            }
            Op::Conv2d { geom, cols } => conv2d_backward(geom, cols, g, input(1), needs, node.inputs.len() == 3),
            Op::BatchNorm { xhat, inv_std, train, channels, hw } => {
                batchnorm_backward(xhat, inv_std, *train, *channels, *hw, g, input(1), needs)
            }
            Op::MaxPool { argmax } => {
                let mut d = vec![T::zero(); input(0).len()];
                for (j, &src) in argmax.iter().enumerate() {
                    d[src] += g[j];
                }
                vec![Some(d)]
            }
            Op::GlobalAvgPool { hw } => {
                let scale = T::one() / T::from_f64(*hw as f64);
                let d = g.iter().flat_map(|&v| std::iter::repeat_n(v * scale, *hw)).collect();
                vec![Some(d)]
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Element>(
    geom: &ConvGeom,
    cols: &[T],
    g: &[T],
    weight: &[T],
    needs: &[bool],
    has_bias: bool,
) -> Vec<Option<Vec<T>>> {
    let ckk = geom.col_rows();
    let ohw = geom.out_hw();
    let o = geom.out_ch;
    let gx = needs[0].then(|| {
        let img = geom.in_ch * geom.in_hw();
        let mut dx = vec![T::zero(); geom.batch * img];
        let mut dcols = vec![T::zero(); ckk * ohw];
        for b in 0..geom.batch {
            let gb = &g[b * o * ohw..(b + 1) * o * ohw];
            gemm(ckk, o, ohw, weight, true, gb, false, &mut dcols, false);
            col2im(&dcols, geom, &mut dx[b * img..(b + 1) * img]);
        }
        dx
    });
    let gw = needs[1].then(|| {
        let mut dw = vec![T::zero(); o * ckk];
        for b in 0..geom.batch {
            let gb = &g[b * o * ohw..(b + 1) * o * ohw];
            let cb = &cols[b * ckk * ohw..(b + 1) * ckk * ohw];
            gemm(o, ohw, ckk, gb, false, cb, true, &mut dw, true);
        }
        dw
    });
    let mut grads = vec![gx, gw];
    if has_bias {
        grads.push(needs[2].then(|| {
            let mut db = vec![T::zero(); o];
            for plane in g.chunks(ohw).enumerate() {
                db[plane.0 % o] += plane.1.iter().copied().sum();
            }
            db
        }));
    }
    grads
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_backward<T: Element>(
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    channels: usize,
    hw: usize,
    g: &[T],
    gamma: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let mut sum_g = vec![T::zero(); channels];
    let mut sum_gx = vec![T::zero(); channels];
    for (i, (plane_g, plane_x)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
        let c = i % channels;
        for (&gv, &xv) in plane_g.iter().zip(plane_x) {
            sum_g[c] += gv;
            sum_gx[c] += gv * xv;
        }
    }
    let count = T::from_f64((g.len() / channels) as f64);
    let gx = needs[0].then(|| {
        let mut dx = vec![T::zero(); g.len()];
        for (i, ((dplane, plane_g), plane_x)) in dx.chunks_mut(hw).zip(g.chunks(hw)).zip(xhat.chunks(hw)).enumerate() {
            let c = i % channels;
            let scale = gamma[c] * inv_std[c];
            if train {
                let mg = sum_g[c] / count;
                let mgx = sum_gx[c] / count;
                for ((d, &gv), &xv) in dplane.iter_mut().zip(plane_g).zip(plane_x) {
                    *d = scale * (gv - mg - xv * mgx);
                }
            } else {
                for (d, &gv) in dplane.iter_mut().zip(plane_g) {
                    *d = scale * gv;
                }
            }
        }
        dx
    });
    vec![gx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
}

/// Batch statistics from a train-mode batch norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n − 1) variance, the value running statistics track.
    pub var_unbiased: Vec<T>,
}

impl<'t, T: Element> Var<'t, T> {
    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: Vec<usize>) -> Var<'t, T> {
        self.tape.push_op(value, op, inputs)
    }

    fn binary(&self, other: &Var<'t, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let a = self.tape.value(self.id);
        let b = self.tape.value(other.id);
        let bd = b.data();
        let data: Vec<T> = if a.shape() == b.shape() {
            a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else if b.numel() == 1 {
            a.data().iter().map(|&x| f(x, bd[0])).collect()
        } else {
            return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
        };
        if matches!(op, Op::Div) && bd.iter().any(|v| v.is_zero()) {
            return Err(Error::Domain("division by zero".into()));
        }
        Ok(self.push(Tensor::from_parts(a.shape(), data, false), op, vec![self.id, other.id]))
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var<'t, T>> {
        let x = self.value()?;
        Ok(self.push(map_tensor(&x, f), op, vec![self.id]))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Add, |a, b| a + b)
    }
    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }
    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Div, |a, b| a / b)
    }
    pub fn neg(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Neg, |v| -v)
    }
    pub fn exp(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Exp, |v| v.exp())
    }
    pub fn ln(&self) -> Result<Var<'t, T>> {
        let x = self.value()?;
        if let Some(bad) = x.data().iter().find(|&&v| v <= T::zero()) {
            return Err(Error::Domain(format!("ln of non-positive value {bad}")));
        }
        self.unary(Op::Ln, |v| v.ln())
    }
    pub fn powf(&self, p: f64) -> Result<Var<'t, T>> {
        let pt = T::from_f64(p);
        self.unary(Op::Pow(p), move |v| v.powf(pt))
    }
    pub fn add_scalar(&self, s: f64) -> Result<Var<'t, T>> {
        let st = T::from_f64(s);
        self.unary(Op::AddScalar, move |v| v + st)
    }
    pub fn mul_scalar(&self, s: f64) -> Result<Var<'t, T>> {
        let st = T::from_f64(s);
        self.unary(Op::MulScalar(s), move |v| v * st)
    }
    pub fn tanh(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Tanh, |v| v.tanh())
    }
    /// `max(0, x)`; the gradient at exactly 0 is 0.
    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Relu, |v| if v > T::zero() { v } else { T::zero() })
    }
    pub fn softplus(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Softplus, softplus_scalar)
    }
    /// `x · tanh(softplus(x))` as one fused node.
    pub fn mish(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Mish, mish_scalar)
    }
    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t, T>> {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(Op::Clamp { lo, hi }, move |v| v.max(l).min(h))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value()?;
        let y = x.detach().reshaped(shape)?;
        Ok(self.push(y, Op::Reshape, vec![self.id]))
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let a = self.tape.value(self.id);
        let b = self.tape.value(other.id);
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::shape(format!("matmul needs rank-2 operands, got {:?} and {:?}", a.shape(), b.shape())));
        };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut c = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        Ok(self.push(Tensor::from_parts(&[m, n], c, false), Op::Matmul { m, k, n }, vec![self.id, other.id]))
    }

    /// Reduce over one axis (removed from the shape) or over everything
    /// (result shape `[1]`). Max routes its gradient to the lowest flat index
    /// among tied maxima.
    pub fn reduce(&self, op: Reduce, axis: Option<usize>) -> Result<Var<'t, T>> {
        let x = self.value()?;
        let shape = x.shape();
        if let Some(ax) = axis {
            if ax >= shape.len() {
                return Err(Error::AxisOutOfRange { axis: ax, rank: shape.len() });
            }
        }
        let data = x.data();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, data.len(), 1, vec![1]),
            Some(ax) => {
                let (o, l, i) = axis_split(shape, ax);
                (o, l, i, reduced_shape(shape, ax))
            }
        };
        let mut values = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; if op == Reduce::Max { outer * inner } else { 0 }];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let j = o * inner + i;
                match op {
                    Reduce::Sum | Reduce::Mean => {
                        let s: T = (0..len).map(|l| data[idx(l)]).sum();
                        values[j] = if op == Reduce::Mean { s / T::from_f64(len as f64) } else { s };
                    }
                    Reduce::Max => {
                        let mut best = idx(0);
                        for l in 1..len {
                            if data[idx(l)] > data[best] {
                                best = idx(l);
                            }
                        }
                        argmax[j] = best;
                        values[j] = data[best];
                    }
                }
            }
        }
        let node = match op {
            Reduce::Sum => Op::Sum { axis },
            Reduce::Mean => Op::Mean { axis },
            Reduce::Max => Op::Max { argmax },
        };
        Ok(self.push(Tensor::from_parts(&out_shape, values, false), node, vec![self.id]))
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        self.reduce(Reduce::Sum, None)
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        self.reduce(Reduce::Mean, None)
    }

    /// Row-wise softmax of a `[batch, classes]` matrix, max-shifted.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let x = self.value()?;
        let &[_, cols] = x.shape() else {
            return Err(Error::shape(format!("softmax expects [batch, classes], got {:?}", x.shape())));
        };
        let mut y = x.to_vec();
        for row in y.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        Ok(self.push(Tensor::from_parts(x.shape(), y, false), Op::Softmax { cols }, vec![self.id]))
    }

    /// `out[r] = x[r, targets[r]]` for a `[batch, classes]` matrix.
    pub fn pick(&self, targets: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value()?;
        let &[rows, cols] = x.shape() else {
            return Err(Error::shape(format!("pick expects rank 2, got {:?}", x.shape())));
        };
        if rows != targets.len() {
            return Err(Error::LengthMismatch(rows, targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::InvalidTarget { target: bad, classes: cols });
        }
        let values = targets.iter().enumerate().map(|(r, &t)| x.data()[r * cols + t]).collect();
        Ok(self.push(
            Tensor::from_parts(&[rows], values, false),
            Op::Pick { targets: targets.to_vec(), cols },
            vec![self.id],
        ))
    }

    /// `x · weightᵀ + bias` for `x: [batch, in]`, `weight: [out, in]`.
    pub fn linear(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(weight)?;
        let x = self.tape.value(self.id);
        let w = self.tape.value(weight.id);
        let (&[batch, in_f], &[out_f, w_in]) = (x.shape(), w.shape()) else {
            return Err(Error::shape(format!("linear expects [b,in]·[out,in], got {:?}, {:?}", x.shape(), w.shape())));
        };
        if in_f != w_in {
            return Err(Error::shape(format!("linear input {in_f} vs weight {w_in}")));
        }
        let mut y = vec![T::zero(); batch * out_f];
        gemm(batch, in_f, out_f, x.data(), false, w.data(), true, &mut y, false);
        let mut inputs = vec![self.id, weight.id];
        if let Some(bias) = bias {
            self.same_tape(bias)?;
            let b = self.tape.value(bias.id);
            if b.shape() != [out_f] {
                return Err(Error::shape(format!("bias shape {:?}, expected [{out_f}]", b.shape())));
            }
            for row in y.chunks_mut(out_f) {
                row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
            }
            inputs.push(bias.id);
        }
        Ok(self.push(Tensor::from_parts(&[batch, out_f], y, false), Op::Linear { batch, in_f, out_f }, inputs))
    }

    /// Zero-padded cross-correlation. `weight: [out, in, kh, kw]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(weight)?;
        let x = self.tape.value(self.id);
        let w = self.tape.value(weight.id);
        let (&[batch, in_ch, h, wd], &[out_ch, w_in, kh, kw]) = (x.shape(), w.shape()) else {
            return Err(Error::shape(format!(
                "conv2d expects rank-4 input and weight, got {:?}, {:?}",
                x.shape(),
                w.shape()
            )));
        };
        if in_ch != w_in {
            return Err(Error::shape(format!("conv2d input has {in_ch} channels, weight expects {w_in}")));
        }
        let (Some(ho), Some(wo)) = (window_out(h, kh, stride, pad), window_out(wd, kw, stride, pad)) else {
            return Err(Error::DegenerateOutput(format!(
                "{h}x{wd} input, {kh}x{kw} kernel, stride {stride}, pad {pad}"
            )));
        };
        let geom = ConvGeom { batch, in_ch, h, w: wd, out_ch, kh, kw, stride, pad, ho, wo };
        let bias_t = match bias {
            Some(b) => {
                self.same_tape(b)?;
                let bt = self.tape.value(b.id);
                if bt.shape() != [out_ch] {
                    return Err(Error::shape(format!("bias shape {:?}, expected [{out_ch}]", bt.shape())));
                }
                Some(bt)
            }
            None => None,
        };
        let keep_cols = self.tape.node_requires_grad(weight.id);
        let ckk = geom.col_rows();
        let ohw = geom.out_hw();
        let img = in_ch * h * wd;
        let mut cols = vec![T::zero(); if keep_cols { batch * ckk * ohw } else { ckk * ohw }];
        let mut y = vec![T::zero(); batch * out_ch * ohw];
        for b in 0..batch {
            let cb = if keep_cols { &mut cols[b * ckk * ohw..(b + 1) * ckk * ohw] } else { &mut cols[..] };
            im2col(&x.data()[b * img..(b + 1) * img], &geom, cb);
            gemm(out_ch, ckk, ohw, w.data(), false, cb, false, &mut y[b * out_ch * ohw..(b + 1) * out_ch * ohw], false);
        }
        let mut inputs = vec![self.id, weight.id];
        if let (Some(bt), Some(bv)) = (&bias_t, bias) {
            for (i, plane) in y.chunks_mut(ohw).enumerate() {
                let bval = bt.data()[i % out_ch];
                plane.iter_mut().for_each(|v| *v += bval);
            }
            inputs.push(bv.id);
        }
        if !keep_cols {
            cols = Vec::new();
        }
        Ok(self.push(Tensor::from_parts(&[batch, out_ch, ho, wo], y, false), Op::Conv2d { geom, cols }, inputs))
    }

    fn bn_common(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>) -> Result<BnInputs<T>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let x = self.tape.value(self.id);
        let &[_, c, h, w] = x.shape() else {
            return Err(Error::shape(format!("batch norm expects [b,c,h,w], got {:?}", x.shape())));
        };
        let g = self.tape.value(gamma.id);
        let b = self.tape.value(beta.id);
        if g.shape() != [c] || b.shape() != [c] {
            return Err(Error::shape(format!("gamma/beta must be [{c}]")));
        }
        Ok((x, g, b, c, h * w))
    }

    /// Normalize with per-channel batch statistics.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        eps: f64,
    ) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let (x, g, b, channels, hw) = self.bn_common(gamma, beta)?;
        let count = x.numel() / channels;
        if count < 2 {
            return Err(Error::InsufficientBatch(count));
        }
        let n = T::from_f64(count as f64);
        let mut mean = vec![T::zero(); channels];
        for (i, plane) in x.data().chunks(hw).enumerate() {
            mean[i % channels] += plane.iter().copied().sum();
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut sq = vec![T::zero(); channels];
        for (i, plane) in x.data().chunks(hw).enumerate() {
            let m = mean[i % channels];
            sq[i % channels] += plane.iter().map(|&v| (v - m) * (v - m)).sum();
        }
        let eps_t = T::from_f64(eps);
        let inv_std: Vec<T> = sq.iter().map(|&s| T::one() / (s / n + eps_t).sqrt()).collect();
        let var_unbiased = sq.iter().map(|&s| s / (n - T::one())).collect();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut y = vec![T::zero(); x.numel()];
        for (i, ((xp, hp), yp)) in x.data().chunks(hw).zip(xhat.chunks_mut(hw)).zip(y.chunks_mut(hw)).enumerate() {
            let c = i % channels;
            for ((&xv, hv), yv) in xp.iter().zip(hp.iter_mut()).zip(yp.iter_mut()) {
                *hv = (xv - mean[c]) * inv_std[c];
                *yv = g.data()[c] * *hv + b.data()[c];
            }
        }
        let out = self.push(
            Tensor::from_parts(x.shape(), y, false),
            Op::BatchNorm { xhat, inv_std, train: true, channels, hw },
            vec![self.id, gamma.id, beta.id],
        );
        Ok((out, BatchStats { mean, var_unbiased }))
    }

    /// Normalize with fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var<'t, T>> {
        let (x, g, b, channels, hw) = self.bn_common(gamma, beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::shape(format!("running stats must have {channels} entries")));
        }
        let eps_t = T::from_f64(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut y = vec![T::zero(); x.numel()];
        for (i, ((xp, hp), yp)) in x.data().chunks(hw).zip(xhat.chunks_mut(hw)).zip(y.chunks_mut(hw)).enumerate() {
            let c = i % channels;
            for ((&xv, hv), yv) in xp.iter().zip(hp.iter_mut()).zip(yp.iter_mut()) {
                *hv = (xv - running_mean[c]) * inv_std[c];
                *yv = g.data()[c] * *hv + b.data()[c];
            }
        }
        Ok(self.push(
            Tensor::from_parts(x.shape(), y, false),
            Op::BatchNorm { xhat, inv_std, train: false, channels, hw },
            vec![self.id, gamma.id, beta.id],
        ))
    }

    /// Window max with implicit `-inf` padding; ties go to the first element
    /// of the window in row-major order.
    pub fn max_pool2d(&self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let x = self.value()?;
        let &[batch, ch, h, w] = x.shape() else {
            return Err(Error::shape(format!("max_pool2d expects [b,c,h,w], got {:?}", x.shape())));
        };
        let (Some(ho), Some(wo)) = (window_out(h, kernel, stride, pad), window_out(w, kernel, stride, pad)) else {
            return Err(Error::DegenerateOutput(format!("{h}x{w} input, kernel {kernel}, stride {stride}")));
        };
        if pad >= kernel {
            return Err(Error::DegenerateOutput(format!("padding {pad} must be below kernel {kernel}")));
        }
        let data = x.data();
        let mut y = Vec::with_capacity(batch * ch * ho * wo);
        let mut argmax = Vec::with_capacity(y.capacity());
        for plane in 0..batch * ch {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best: Option<usize> = None;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if best.is_none_or(|b| data[idx] > data[b]) {
                                best = Some(idx);
                            }
                        }
                    }
                    let best = best.expect("window overlaps input");
                    argmax.push(best);
                    y.push(data[best]);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(&[batch, ch, ho, wo], y, false), Op::MaxPool { argmax }, vec![self.id]))
    }

    /// Spatial mean per channel: `[b, c, h, w] → [b, c]`.
    pub fn global_avg_pool(&self) -> Result<Var<'t, T>> {
        let x = self.value()?;
        let &[batch, ch, h, w] = x.shape() else {
            return Err(Error::shape(format!("global_avg_pool expects [b,c,h,w], got {:?}", x.shape())));
        };
        let hw = h * w;
        let scale = T::one() / T::from_f64(hw as f64);
        let y = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * scale).collect();
        Ok(self.push(Tensor::from_parts(&[batch, ch], y, false), Op::GlobalAvgPool { hw }, vec![self.id]))
    }
}
