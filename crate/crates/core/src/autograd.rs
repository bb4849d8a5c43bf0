//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and, when any input requires a
//! gradient, appends a node carrying enough context for its backward rule.
//! Nodes are stored in creation order, which is a topological order, so
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use jssl_core::autograd::Tape;
//! use jssl_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let w = tape.param(Tensor::scalar(3.0));
//! let loss = w.square().unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
//! ```
//!
//! Complex values use a trailing axis of extent 2. Gradients are taken with
//! respect to the real and imaginary parts independently, so every complex
//! operator's backward rule is the transpose of its real 2×2 block form.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::fft;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pad2 {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad2 {
    pub fn uniform(p: usize) -> Self {
        Pad2 {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    ScalarMul(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize, [usize; 3]),
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    Relu(usize),
    Abs(usize),
    Sqrt(usize),
    Square(usize),
    Exp(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    SumAxis {
        input: usize,
        pre: usize,
        n: usize,
        post: usize,
    },
    Reshape(usize),
    Gather {
        input: usize,
        map: Rc<Vec<usize>>,
    },
    Slice {
        input: usize,
        pre: usize,
        n: usize,
        post: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<(usize, usize)>,
        pre: usize,
        post: usize,
    },
    ComplexMul(usize, usize),
    ComplexConj(usize),
    ComplexAbs(usize),
    Fft2c(usize),
    Ifft2c(usize),
    MaskApply {
        input: usize,
        mask: Arc<Tensor>,
    },
    Pad {
        input: usize,
        map: Rc<Vec<Option<usize>>>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zero-filled when `v` did not influence the loss.
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        let shape = self.shapes.get(v.id)?;
        Some(match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Strides-based index map for gathering `src` elements into `dst_shape`.
fn strided_map(dst_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel(dst_shape);
    let nd = dst_shape.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < dst_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn pad_source(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Replicate => Some(i.clamp(0, n - 1) as usize),
        PadMode::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (n - 1);
            let mut r = i.rem_euclid(period);
            if r >= n {
                r = period - r;
            }
            Some(r as usize)
        }
    }
}

fn complex_mul_into(a: &[f64], b: &[f64], out: &mut [f64], conj_b: bool) {
    let s = if conj_b { -1.0 } else { 1.0 };
    for ((o, x), y) in out
        .chunks_exact_mut(2)
        .zip(a.chunks_exact(2))
        .zip(b.chunks_exact(2).cycle())
    {
        let (br, bi) = (y[0], s * y[1]);
        o[0] = x[0] * br - x[1] * bi;
        o[1] = x[0] * bi + x[1] * br;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::invalid("loss belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let loss_len = nodes[loss.id].value.len();
        if loss_len != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got {:?}",
                    nodes[loss.id].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match (&node.op, grads[id].take()) {
                (Op::Leaf, g) => {
                    grads[id] = g;
                    continue;
                }
                (_, None) => continue,
                (_, Some(g)) => g,
            };
            let val = |i: usize| &nodes[i].value;
            let req = |i: usize| nodes[i].requires_grad;
            let send = |i: usize, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if req(i) {
                    accumulate(&mut grads[i], t);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g.scale(-1.0), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if req(*a) {
                        send(*a, g.zip_map(vb, |g, y| g * y)?, &mut grads);
                    }
                    if req(*b) {
                        send(*b, g.zip_map(va, |g, x| g * x)?, &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if req(*a) {
                        send(*a, g.zip_map(vb, |g, y| g / y)?, &mut grads);
                    }
                    if req(*b) {
                        let d: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(va.data())
                            .zip(vb.data())
                            .map(|((g, x), y)| -g * x / (y * y))
                            .collect();
                        send(*b, Tensor::from_parts(vb.shape().to_vec(), d), &mut grads);
                    }
                }
                Op::ScalarMul(a, c) => send(*a, g.scale(*c), &mut grads),
                Op::AddScalar(a) => send(*a, g, &mut grads),
                Op::MatMul(a, b, [m, k, n]) => {
                    let (va, vb) = (val(*a), val(*b));
                    if req(*a) {
                        let d = conv::matmul(*m, *n, *k, g.data(), false, vb.data(), true);
                        send(*a, Tensor::from_parts(vec![*m, *k], d), &mut grads);
                    }
                    if req(*b) {
                        let d = conv::matmul(*k, *m, *n, va.data(), true, g.data(), false);
                        send(*b, Tensor::from_parts(vec![*k, *n], d), &mut grads);
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    geom,
                } => {
                    let (vi, vk) = (val(*input), val(*kernel));
                    let (di, dk) = conv::backward(
                        geom,
                        vi.data(),
                        vk.data(),
                        g.data(),
                        req(*input),
                        req(*kernel),
                    );
                    if let Some(di) = di {
                        send(
                            *input,
                            Tensor::from_parts(vi.shape().to_vec(), di),
                            &mut grads,
                        );
                    }
                    if let Some(dk) = dk {
                        send(
                            *kernel,
                            Tensor::from_parts(vk.shape().to_vec(), dk),
                            &mut grads,
                        );
                    }
                }
                Op::Relu(a) => {
                    let d = g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                    send(*a, d, &mut grads);
                }
                Op::Abs(a) => {
                    let d = g.zip_map(val(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })?;
                    send(*a, d, &mut grads);
                }
                Op::Sqrt(a) => {
                    let d =
                        g.zip_map(&node.value, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 })?;
                    send(*a, d, &mut grads);
                }
                Op::Square(a) => {
                    let d = g.zip_map(val(*a), |g, x| 2.0 * g * x)?;
                    send(*a, d, &mut grads);
                }
                Op::Exp(a) => {
                    let d = g.zip_map(&node.value, |g, y| g * y)?;
                    send(*a, d, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?;
                    send(*a, d, &mut grads);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    send(*a, Tensor::full(val(*a).shape(), s), &mut grads);
                }
                Op::Mean(a) => {
                    let va = val(*a);
                    let s = g.data()[0] / va.len() as f64;
                    send(*a, Tensor::full(va.shape(), s), &mut grads);
                }
                Op::SumAxis {
                    input,
                    pre,
                    n,
                    post,
                } => {
                    let vi = val(*input);
                    let mut d = vec![0.0; vi.len()];
                    for p in 0..*pre {
                        for i in 0..*n {
                            let dst = &mut d[(p * n + i) * post..(p * n + i + 1) * post];
                            dst.copy_from_slice(&g.data()[p * post..(p + 1) * post]);
                        }
                    }
                    send(
                        *input,
                        Tensor::from_parts(vi.shape().to_vec(), d),
                        &mut grads,
                    );
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    send(*a, Tensor::from_parts(shape, g.into_data()), &mut grads);
                }
                Op::Gather { input, map } => {
                    let vi = val(*input);
                    let mut d = vec![0.0; vi.len()];
                    for (o, &s) in map.iter().enumerate() {
                        d[s] += g.data()[o];
                    }
                    send(
                        *input,
                        Tensor::from_parts(vi.shape().to_vec(), d),
                        &mut grads,
                    );
                }
                Op::Slice {
                    input,
                    pre,
                    n,
                    post,
                    start,
                } => {
                    let vi = val(*input);
                    let len = g.len() / (pre * post);
                    let mut d = vec![0.0; vi.len()];
                    for p in 0..*pre {
                        let src = &g.data()[p * len * post..(p + 1) * len * post];
                        let off = (p * n + start) * post;
                        d[off..off + len * post].copy_from_slice(src);
                    }
                    send(
                        *input,
                        Tensor::from_parts(vi.shape().to_vec(), d),
                        &mut grads,
                    );
                }
                Op::Concat { inputs, pre, post } => {
                    let total: usize = inputs.iter().map(|(_, n)| n).sum();
                    let mut offset = 0;
                    for &(i, n) in inputs {
                        if req(i) {
                            let mut d = Vec::with_capacity(pre * n * post);
                            for p in 0..*pre {
                                let base = (p * total + offset) * post;
                                d.extend_from_slice(&g.data()[base..base + n * post]);
                            }
                            send(
                                i,
                                Tensor::from_parts(val(i).shape().to_vec(), d),
                                &mut grads,
                            );
                        }
                        offset += n;
                    }
                }
                Op::ComplexMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if req(*a) {
                        let mut d = vec![0.0; va.len()];
                        complex_mul_into(g.data(), vb.data(), &mut d, true);
                        send(*a, Tensor::from_parts(va.shape().to_vec(), d), &mut grads);
                    }
                    if req(*b) {
                        // g·conj(a), summed over the broadcast leading axes.
                        let mut full = vec![0.0; va.len()];
                        complex_mul_into(g.data(), va.data(), &mut full, true);
                        let mut d = vec![0.0; vb.len()];
                        for chunk in full.chunks_exact(vb.len()) {
                            for (x, y) in d.iter_mut().zip(chunk) {
                                *x += y;
                            }
                        }
                        send(*b, Tensor::from_parts(vb.shape().to_vec(), d), &mut grads);
                    }
                }
                Op::ComplexConj(a) => {
                    let mut d = g.into_data();
                    for c in d.chunks_exact_mut(2) {
                        c[1] = -c[1];
                    }
                    send(
                        *a,
                        Tensor::from_parts(val(*a).shape().to_vec(), d),
                        &mut grads,
                    );
                }
                Op::ComplexAbs(a) => {
                    let va = val(*a);
                    let mut d = vec![0.0; va.len()];
                    for ((o, x), (&gv, &m)) in d
                        .chunks_exact_mut(2)
                        .zip(va.data().chunks_exact(2))
                        .zip(g.data().iter().zip(node.value.data()))
                    {
                        if m > 0.0 {
                            o[0] = gv * x[0] / m;
                            o[1] = gv * x[1] / m;
                        }
                    }
                    send(*a, Tensor::from_parts(va.shape().to_vec(), d), &mut grads);
                }
                // Orthonormal: the adjoint of F is F⁻¹ and vice versa.
                Op::Fft2c(a) => send(*a, fft::ifft2c(&g)?, &mut grads),
                Op::Ifft2c(a) => send(*a, fft::fft2c(&g)?, &mut grads),
                Op::MaskApply { input, mask } => {
                    send(*input, apply_mask_kernel(&g, mask), &mut grads);
                }
                Op::Pad { input, map } => {
                    let vi = val(*input);
                    let mut d = vec![0.0; vi.len()];
                    for (o, s) in map.iter().enumerate() {
                        if let Some(s) = s {
                            d[*s] += g.data()[o];
                        }
                    }
                    send(
                        *input,
                        Tensor::from_parts(vi.shape().to_vec(), d),
                        &mut grads,
                    );
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    g
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Multiplies a complex tensor `(..., nx, ny, 2)` by a binary `(nx, ny)` mask.
pub(crate) fn apply_mask_kernel(t: &Tensor, mask: &Tensor) -> Tensor {
    let plane = mask.len();
    let mut d = t.data().to_vec();
    for chunk in d.chunks_exact_mut(plane * 2) {
        for (c, &m) in chunk.chunks_exact_mut(2).zip(mask.data()) {
            if m == 0.0 {
                c[0] = 0.0;
                c[1] = 0.0;
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), d)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, other: Var<'t>) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        Ok((a, b))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape("add", other)?;
        Ok(self.binary(other, a.add(&b)?, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape("sub", other)?;
        Ok(self.binary(other, a.sub(&b)?, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape("mul", other)?;
        Ok(self.binary(
            other,
            a.zip_map(&b, |x, y| x * y)?,
            Op::Mul(self.id, other.id),
        ))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape("div", other)?;
        Ok(self.binary(
            other,
            a.zip_map(&b, |x, y| x / y)?,
            Op::Div(self.id, other.id),
        ))
    }

    pub fn scalar_mul(&self, c: f64) -> Result<Var<'t>> {
        Ok(self.unary(self.value().scale(c), Op::ScalarMul(self.id, c)))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        Ok(self.unary(self.value().map(|v| v + c), Op::AddScalar(self.id)))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let v = conv::matmul(m, k, n, a.data(), false, b.data(), false);
        Ok(self.binary(
            other,
            Tensor::from_parts(vec![m, n], v),
            Op::MatMul(self.id, other.id, [m, k, n]),
        ))
    }

    /// Valid dilated 2-D cross-correlation of `(c_in, h, w)` with a
    /// `(c_out, c_in, kh, kw)` kernel.
    pub fn conv2d(&self, kernel: Var<'t>, dilation: usize) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        let bad = || {
            Error::shape(
                "conv2d",
                format!(
                    "input {:?}, kernel {:?}, dilation {dilation}",
                    x.shape(),
                    k.shape()
                ),
            )
        };
        if x.ndim() != 3 || k.ndim() != 4 || k.shape()[1] != x.shape()[0] || dilation == 0 {
            return Err(bad());
        }
        let geom = ConvGeom {
            c_in: x.shape()[0],
            h: x.shape()[1],
            w: x.shape()[2],
            c_out: k.shape()[0],
            kh: k.shape()[2],
            kw: k.shape()[3],
            dilation,
        };
        if geom.h < dilation * (geom.kh - 1) + 1 || geom.w < dilation * (geom.kw - 1) + 1 {
            return Err(bad());
        }
        let out = conv::forward(&geom, x.data(), k.data());
        let value = Tensor::from_parts(vec![geom.c_out, geom.out_h(), geom.out_w()], out);
        Ok(self.binary(
            kernel,
            value,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
        ))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        Ok(self.unary(self.value().map(|v| v.max(0.0)), Op::Relu(self.id)))
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        Ok(self.unary(self.value().map(f64::abs), Op::Abs(self.id)))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(x) = v.data().iter().find(|x| **x < 0.0) {
            return Err(Error::invalid(format!("sqrt of negative value {x}")));
        }
        Ok(self.unary(v.map(f64::sqrt), Op::Sqrt(self.id)))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        Ok(self.unary(self.value().map(|v| v * v), Op::Square(self.id)))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        Ok(self.unary(self.value().map(f64::exp), Op::Exp(self.id)))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        Ok(self.unary(
            self.value().map(|v| 1.0 / (1.0 + (-v).exp())),
            Op::Sigmoid(self.id),
        ))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&self) -> Result<Var<'t>> {
        Ok(self.unary(Tensor::scalar(self.value().sum()), Op::Sum(self.id)))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        Ok(self.unary(Tensor::scalar(v.sum() / v.len() as f64), Op::Mean(self.id)))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.ndim() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} of {:?}", v.shape()),
            ));
        }
        let (pre, n, post) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; pre * post];
        for p in 0..pre {
            for i in 0..n {
                let src = &v.data()[(p * n + i) * post..(p * n + i + 1) * post];
                for (o, s) in out[p * post..(p + 1) * post].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary(
            Tensor::from_parts(shape, out),
            Op::SumAxis {
                input: self.id,
                pre,
                n,
                post,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let mut seen = vec![false; v.ndim()];
        if axes.len() != v.ndim()
            || axes
                .iter()
                .any(|&a| a >= v.ndim() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} for {:?}", v.shape()),
            ));
        }
        let src_strides = row_major_strides(v.shape());
        let dst_shape: Vec<usize> = axes.iter().map(|&a| v.shape()[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        Ok(self.gather(&v, dst_shape, strided_map_for(&v, &strides, axes)))
    }

    fn gather(&self, v: &Tensor, dst_shape: Vec<usize>, map: Vec<usize>) -> Var<'t> {
        let data = map.iter().map(|&s| v.data()[s]).collect();
        self.unary(
            Tensor::from_parts(dst_shape, data),
            Op::Gather {
                input: self.id,
                map: Rc::new(map),
            },
        )
    }

    /// Broadcasts unit axes to `shape` (same rank required).
    pub fn expand(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let ok =
            v.ndim() == shape.len() && v.shape().iter().zip(shape).all(|(&s, &d)| s == d || s == 1);
        if !ok {
            return Err(Error::shape(
                "expand",
                format!("{:?} -> {:?}", v.shape(), shape),
            ));
        }
        let st = row_major_strides(v.shape());
        let strides: Vec<usize> = v
            .shape()
            .iter()
            .zip(&st)
            .map(|(&s, &t)| if s == 1 { 0 } else { t })
            .collect();
        Ok(self.gather(&v, shape.to_vec(), strided_map(shape, &strides)))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.ndim() || start + len > v.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!(
                    "[{start}..{}] on axis {axis} of {:?}",
                    start + len,
                    v.shape()
                ),
            ));
        }
        let (pre, n, post) = split_axis(v.shape(), axis);
        let mut out = Vec::with_capacity(pre * len * post);
        for p in 0..pre {
            let off = (p * n + start) * post;
            out.extend_from_slice(&v.data()[off..off + len * post]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(
            Tensor::from_parts(shape, out),
            Op::Slice {
                input: self.id,
                pre,
                n,
                post,
                start,
            },
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{base:?} vs {s:?} on axis {axis}"),
                ));
            }
        }
        let (pre, _, post) = split_axis(&base, axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut out = Vec::with_capacity(pre * total * post);
        for p in 0..pre {
            for v in &values {
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[p * n * post..(p + 1) * n * post]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        let inputs = parts
            .iter()
            .zip(&values)
            .map(|(p, v)| (p.id, v.shape()[axis]))
            .collect();
        Ok(tape.push(
            Tensor::from_parts(shape, out),
            Op::Concat { inputs, pre, post },
            rg,
        ))
    }

    /// Complex product. `other` may equal `self`'s shape or a trailing
    /// suffix of it, in which case it is broadcast over the leading axes.
    pub fn complex_mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let ok = a.is_complex() && b.is_complex() && a.shape().ends_with(b.shape());
        if !ok {
            return Err(Error::shape(
                "complex_mul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let mut out = vec![0.0; a.len()];
        complex_mul_into(a.data(), b.data(), &mut out, false);
        Ok(self.binary(
            other,
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::ComplexMul(self.id, other.id),
        ))
    }

    pub fn complex_conj(&self) -> Result<Var<'t>> {
        let v = self.value();
        if !v.is_complex() {
            return Err(Error::shape("complex_conj", format!("{:?}", v.shape())));
        }
        let mut d = v.data().to_vec();
        for c in d.chunks_exact_mut(2) {
            c[1] = -c[1];
        }
        Ok(self.unary(
            Tensor::from_parts(v.shape().to_vec(), d),
            Op::ComplexConj(self.id),
        ))
    }

    /// Complex modulus; the gradient at exactly zero is taken as zero.
    pub fn complex_abs(&self) -> Result<Var<'t>> {
        let v = self.value().complex_abs()?;
        Ok(self.unary(v, Op::ComplexAbs(self.id)))
    }

    pub fn fft2c(&self) -> Result<Var<'t>> {
        Ok(self.unary(fft::fft2c(&self.value())?, Op::Fft2c(self.id)))
    }

    pub fn ifft2c(&self) -> Result<Var<'t>> {
        Ok(self.unary(fft::ifft2c(&self.value())?, Op::Ifft2c(self.id)))
    }

    /// Zeroes complex entries `(..., nx, ny, 2)` outside a binary `(nx, ny)` mask.
    pub fn mask_apply(&self, mask: &Arc<Tensor>) -> Result<Var<'t>> {
        let v = self.value();
        let (_, nx, ny) = fft::complex_dims("mask_apply", v.shape())?;
        if mask.shape() != [nx, ny] {
            return Err(Error::shape(
                "mask_apply",
                format!("mask {:?} on {:?}", mask.shape(), v.shape()),
            ));
        }
        Ok(self.unary(
            apply_mask_kernel(&v, mask),
            Op::MaskApply {
                input: self.id,
                mask: mask.clone(),
            },
        ))
    }

    /// Pads the last two axes of `(..., h, w)`.
    pub fn pad(&self, pad: Pad2, mode: PadMode) -> Result<Var<'t>> {
        let v = self.value();
        let nd = v.ndim();
        if nd < 2
            || (mode == PadMode::Reflect
                && (pad.top.max(pad.bottom) >= v.shape()[nd - 2]
                    || pad.left.max(pad.right) >= v.shape()[nd - 1]))
        {
            return Err(Error::shape(
                "pad",
                format!("{pad:?} ({mode:?}) on {:?}", v.shape()),
            ));
        }
        let (h, w) = (v.shape()[nd - 2], v.shape()[nd - 1]);
        let (oh, ow) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
        let lead = v.len() / (h * w);
        let mut map = Vec::with_capacity(lead * oh * ow);
        for l in 0..lead {
            for i in 0..oh {
                let si = pad_source(i as isize - pad.top as isize, h, mode);
                for j in 0..ow {
                    let sj = pad_source(j as isize - pad.left as isize, w, mode);
                    map.push(si.zip(sj).map(|(a, b)| l * h * w + a * w + b));
                }
            }
        }
        let data = map.iter().map(|s| s.map_or(0.0, |s| v.data()[s])).collect();
        let mut shape = v.shape().to_vec();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::Pad {
                input: self.id,
                map: Rc::new(map),
            },
        ))
    }

    /// Removes a border from the last two axes of `(..., h, w)`.
    pub fn crop(&self, crop: Pad2) -> Result<Var<'t>> {
        let v = self.value();
        let nd = v.ndim();
        if nd < 2
            || crop.top + crop.bottom >= v.shape()[nd - 2]
            || crop.left + crop.right >= v.shape()[nd - 1]
        {
            return Err(Error::shape("crop", format!("{crop:?} on {:?}", v.shape())));
        }
        let (h, w) = (v.shape()[nd - 2], v.shape()[nd - 1]);
        let (oh, ow) = (h - crop.top - crop.bottom, w - crop.left - crop.right);
        let lead = v.len() / (h * w);
        let mut map = Vec::with_capacity(lead * oh * ow);
        for l in 0..lead {
            for i in 0..oh {
                for j in 0..ow {
                    map.push(l * h * w + (i + crop.top) * w + j + crop.left);
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        Ok(self.gather(&v, shape, map))
    }
}

fn strided_map_for(v: &Tensor, strides: &[usize], axes: &[usize]) -> Vec<usize> {
    let dst_shape: Vec<usize> = axes.iter().map(|&a| v.shape()[a]).collect();
    strided_map(&dst_shape, strides)
}

/// Max over coordinates of `|analytic − central difference| / max(1, |central difference|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let coords: Vec<(usize, usize)> = (0..point.len()).map(|i| (0, i)).collect();
    grad_check_multi(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        &coords,
        h,
    )
}

/// [`grad_check`] over several input tensors, restricted to the listed
/// `(tensor, flat index)` coordinates.
pub fn grad_check_multi<F>(
    f: F,
    points: &[Tensor],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if h <= 0.0 {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        f(&tape, &vars)?.value().item()
    };
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v).unwrap()).collect();

    let mut worst = 0.0f64;
    let mut pts = points.to_vec();
    for &(t, i) in coords {
        let orig = pts[t].data()[i];
        pts[t].data_mut()[i] = orig + h;
        let up = eval(&pts)?;
        pts[t].data_mut()[i] = orig - h;
        let down = eval(&pts)?;
        pts[t].data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[t].data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn multi<F>(f: F) -> F
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        f
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);

        let x = tape.param(t(&[2], &[-1.0, 2.0]));
        let r = x.relu().unwrap();
        assert_eq!(r.value().data(), &[0.0, 2.0]);
        let g = tape.backward(r.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_kink_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[0.0, 1.0, -1.0]));
        let g = tape.backward(x.relu().unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn simple_backward_examples() {
        let tape = Tape::new();
        let w = tape.param(t(&[1], &[3.0]));
        let g = tape.backward(w.square().unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[6.0]);

        let tape = Tape::new();
        let w = tape.param(Tensor::ones(&[4]));
        let g = tape.backward(w.mean().unwrap()).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected_and_unreachable_leaf_zero() {
        let tape = Tape::new();
        let w = tape.param(Tensor::ones(&[3]));
        let unused = tape.param(Tensor::ones(&[2, 2]));
        assert!(matches!(tape.backward(w), Err(Error::Shape { .. })));
        let g = tape.backward(w.sum().unwrap()).unwrap();
        assert_eq!(g.get(unused).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::ones(&[3]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(
            msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"),
            "{msg}"
        );
        let k = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
        let x = tape.constant(Tensor::ones(&[1, 5, 5]));
        assert!(x.conv2d(k, 1).unwrap_err().to_string().contains("conv2d"));
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // sum(sqrt(square(w·x) + 1) · relu(x)) / mean(exp(w))
        let f = multi(|_, v| {
            let (w, x) = (v[0], v[1]);
            let a = w.mul(x)?.square()?.add_scalar(1.0)?.sqrt()?;
            let b = a.mul(x.relu()?)?.sum()?;
            b.div(w.exp()?.mean()?)
        });
        let pts = [rand_t(&[6], 1), rand_t(&[6], 2)];
        let coords: Vec<_> = (0..2).flat_map(|t| (0..6).map(move |i| (t, i))).collect();
        let err = grad_check_multi(f, &pts, &coords, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn quadratic_grad_check() {
        let err = grad_check(|_, x| x.square()?.sum(), &rand_t(&[5], 3), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn structural_ops_grad_check() {
        let f = multi(|_, v| {
            let x = v[0]; // (2, 3, 4)
            let p = x.permute(&[2, 0, 1])?; // (4, 2, 3)
            let s = p.slice(0, 1, 2)?; // (2, 2, 3)
            let c = Var::concat(&[s, p], 0)?; // (6, 2, 3)
            let e = c.sum_axis(1)?.reshape(&[6, 1, 3])?.expand(&[6, 4, 3])?;
            let pd = e.pad(
                Pad2 {
                    top: 1,
                    bottom: 2,
                    left: 2,
                    right: 0,
                },
                PadMode::Reflect,
            )?;
            let pr = pd.pad(Pad2::uniform(1), PadMode::Replicate)?;
            let cr = pr.crop(Pad2 {
                top: 1,
                bottom: 0,
                left: 0,
                right: 2,
            })?;
            cr.square()?.mean()
        });
        let coords: Vec<_> = (0..24).map(|i| (0, i)).collect();
        let err = grad_check_multi(f, &[rand_t(&[2, 3, 4], 4)], &coords, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn complex_ops_grad_check() {
        let f = multi(|_, v| {
            let (a, s) = (v[0], v[1]); // (3, 4, 4, 2), (4, 4, 2)
            let mask = Arc::new(Tensor::from_fn(&[4, 4], |i| (i % 3 != 0) as u8 as f64));
            let k = a.complex_mul(s)?.fft2c()?.mask_apply(&mask)?.ifft2c()?;
            let r = k.complex_mul(a.complex_conj()?)?.sum_axis(0)?;
            r.complex_abs()?.add_scalar(0.1)?.square()?.sum()
        });
        let pts = [rand_t(&[3, 4, 4, 2], 5), rand_t(&[4, 4, 2], 6)];
        let coords: Vec<_> = (0..96)
            .map(|i| (0, i))
            .chain((0..32).map(|i| (1, i)))
            .collect();
        let err = grad_check_multi(f, &pts, &coords, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_conv_grad_check() {
        let f = multi(|_, v| {
            let y = v[0].conv2d(v[1], 2)?.relu()?; // (3, 1, 3)
            let m = y.reshape(&[3, 3])?.matmul(v[2])?;
            m.sigmoid()?.sum()
        });
        let pts = [
            rand_t(&[2, 5, 7], 7),
            rand_t(&[3, 2, 3, 3], 8),
            rand_t(&[3, 2], 9),
        ];
        let coords: Vec<_> = (0..70)
            .map(|i| (0, i))
            .chain((0..54).map(|i| (1, i)))
            .chain((0..6).map(|i| (2, i)))
            .collect();
        let err = grad_check_multi(f, &pts, &coords, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_input_gradient_is_full_correlation_with_flipped_kernel() {
        let x = rand_t(&[1, 5, 5], 10);
        let k = rand_t(&[1, 1, 3, 3], 11);
        let gout = rand_t(&[1, 3, 3], 12);
        let tape = Tape::new();
        let xv = tape.param(x);
        let kv = tape.constant(k.clone());
        let y = xv.conv2d(kv, 1).unwrap();
        let loss = y.mul(tape.constant(gout.clone())).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap().get(xv).unwrap();
        // Oracle: zero-pad gout by 2 and correlate with the 180° rotated kernel.
        let kd = k.data();
        let gd = gout.data();
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        let (oi, oj) = (i as isize - 2 + a as isize, j as isize - 2 + b as isize);
                        if (0..3).contains(&oi) && (0..3).contains(&oj) {
                            acc += gd[oi as usize * 3 + oj as usize] * kd[(2 - a) * 3 + (2 - b)];
                        }
                    }
                }
                assert!((g.data()[i * 5 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let x = rand_t(&[8], 13);
        let grad_of = |a: f64, b: f64| {
            let tape = Tape::new();
            let v = tape.param(x.clone());
            let f = v.square().unwrap().sum().unwrap();
            let g = v.exp().unwrap().mean().unwrap();
            let l = f
                .scalar_mul(a)
                .unwrap()
                .add(g.scalar_mul(b).unwrap())
                .unwrap();
            tape.backward(l).unwrap().get(v).unwrap()
        };
        let (a, b) = (0.7, -1.3);
        let combo = grad_of(a, b);
        let sep = grad_of(1.0, 0.0)
            .scale(a)
            .add(&grad_of(0.0, 1.0).scale(b))
            .unwrap();
        assert!(combo.max_abs_diff(&sep).unwrap() < 1e-12);
    }

    #[test]
    fn fft_is_unitary_on_the_tape() {
        let a = rand_t(&[8, 8, 2], 14);
        let b = rand_t(&[8, 8, 2], 15);
        let tape = Tape::new();
        let fa = tape.constant(a.clone()).fft2c().unwrap().value();
        let fb = tape.constant(b.clone()).fft2c().unwrap().value();
        let lhs = crate::tensor::complex_inner(&fa, &fb).unwrap();
        let rhs = crate::tensor::complex_inner(&a, &b).unwrap();
        assert!((lhs.0 - rhs.0).abs() < 1e-10 && (lhs.1 - rhs.1).abs() < 1e-10);
    }

    #[test]
    fn constants_do_not_grow_backward_state() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let d = c.square().unwrap();
        assert!(!d.requires_grad());
        let p = tape.param(Tensor::ones(&[2]));
        assert!(d.add(p).unwrap().requires_grad());
    }

    #[test]
    fn determinism() {
        let run = || {
            let tape = Tape::new();
            let x = tape.param(rand_t(&[2, 6, 6], 16));
            let k = tape.param(rand_t(&[4, 2, 3, 3], 17));
            let l = x
                .conv2d(k, 1)
                .unwrap()
                .relu()
                .unwrap()
                .square()
                .unwrap()
                .mean()
                .unwrap();
            let g = tape.backward(l).unwrap();
            (l.value().data()[0], g.get(x).unwrap(), g.get(k).unwrap())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }
}
