//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles during a
//! forward pass. [`Tape::backward`] replays the records in reverse, visiting
//! each node once, and returns the gradients of the leaves that asked for
//! them. A fresh tape is built for every step and dropped afterwards.
//!
//! Broadcasting is deliberately narrow: the smaller operand of a binary op
//! must be a single element or have a shape that is a suffix of the larger
//! operand's shape (bias vectors, per-channel affine terms).

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::spectral::{self, MagSaved, PoolGeom};

use super::kernels::{self, ConvGeom, MatmulPlan};
use super::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
    Gelu,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
    Max,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        plan: MatmulPlan,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Offset {
        a: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Reduce {
        kind: ReduceKind,
        a: usize,
        map: Vec<usize>,
        // argmax input index per output element (Max only)
        argmax: Vec<usize>,
        count: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Softmax {
        a: usize,
    },
    LogSoftmax {
        a: usize,
    },
    Standardize {
        a: usize,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool {
        a: usize,
        geom: PoolGeom,
    },
    SpectralMagnitude {
        a: usize,
        saved: Box<MagSaved>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
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

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient for a leaf that requires grad; `None` if the loss does not
    /// depend on it (or it is a constant).
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        self.by_node
            .get(v.id)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.id].clone(), g.clone()))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (na, nb) = (numel(a), numel(b));
    let suffix = |big: &[usize], small: &[usize]| {
        small.len() <= big.len() && big[big.len() - small.len()..] == *small
    };
    if nb == 1 || (na >= nb && suffix(a, b)) {
        Ok(a.to_vec())
    } else if na == 1 || suffix(b, a) {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

/// Folds a gradient of `n_out` elements onto an operand of `n_in` elements
/// broadcast by index modulo.
/// Sums a broadcast gradient back onto an operand of `n_in` elements.
fn fold_to(g: Vec<f64>, n_in: usize) -> Vec<f64> {
    if g.len() == n_in {
        return g;
    }
    let mut out = vec![0.0; n_in];
    for chunk in g.chunks(n_in) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_checked(
        &self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push(value, op, requires_grad))
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("loss belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| nodes[i].value.as_ref();
            let need = |i: usize| nodes[i].requires_grad;
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    leaf_grads[id] = Some(g);
                }
                Op::MatMul { a, b, plan } => {
                    if need(*a) {
                        accumulate(&mut grads[*a], plan.grad_lhs(&g, val(*b).data()));
                    }
                    if need(*b) {
                        accumulate(&mut grads[*b], plan.grad_rhs(&g, val(*a).data()));
                    }
                }
                Op::Binary { kind, a, b } => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let (na, nb, n) = (av.len(), bv.len(), g.len());
                    if need(*a) {
                        let da = match kind {
                            BinaryKind::Add | BinaryKind::Sub => fold_to(g.to_vec(), na),
                            BinaryKind::Mul => fold_to(broadcast_zip(&g, bv, n, |g, y| g * y), na),
                            BinaryKind::Div => fold_to(broadcast_zip(&g, bv, n, |g, y| g / y), na),
                        };
                        accumulate(&mut grads[*a], da);
                    }
                    if need(*b) {
                        let db = match kind {
                            BinaryKind::Add => fold_to(g.to_vec(), nb),
                            BinaryKind::Sub => fold_to(g.iter().map(|v| -v).collect(), nb),
                            BinaryKind::Mul => fold_to(broadcast_zip(&g, av, n, |g, x| g * x), nb),
                            BinaryKind::Div => {
                                let gx = broadcast_zip(&g, av, n, |g, x| g * x);
                                fold_to(broadcast_zip(&gx, bv, n, |t, d| -t / (d * d)), nb)
                            }
                        };
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::Scale { a, c } => {
                    accumulate(&mut grads[*a], g.iter().map(|v| v * c).collect());
                }
                Op::Offset { a } => accumulate(&mut grads[*a], g),
                Op::Unary { kind, a } => {
                    let x = val(*a).data();
                    let dx: Vec<f64> = match kind {
                        UnaryKind::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                        UnaryKind::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                        UnaryKind::Sqrt => g
                            .iter()
                            .zip(y)
                            .map(|(g, y)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 })
                            .collect(),
                        UnaryKind::Square => g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect(),
                        UnaryKind::Relu => g
                            .iter()
                            .zip(x)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                        UnaryKind::Gelu => g
                            .iter()
                            .zip(x)
                            .map(|(g, x)| g * kernels::gelu_grad(*x))
                            .collect(),
                        UnaryKind::Abs => g
                            .iter()
                            .zip(x)
                            .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -g } else { 0.0 })
                            .collect(),
                    };
                    accumulate(&mut grads[*a], dx);
                }
                Op::Reduce {
                    kind,
                    a,
                    map,
                    argmax,
                    count,
                } => {
                    let n_in = map.len();
                    let dx = match kind {
                        ReduceKind::Sum => map.iter().map(|&o| g[o]).collect(),
                        ReduceKind::Mean => {
                            let s = 1.0 / *count as f64;
                            map.iter().map(|&o| g[o] * s).collect()
                        }
                        ReduceKind::Max => {
                            let mut dx = vec![0.0; n_in];
                            for (o, &i) in argmax.iter().enumerate() {
                                dx[i] += g[o];
                            }
                            dx
                        }
                    };
                    accumulate(&mut grads[*a], dx);
                }
                Op::Reshape { a } => accumulate(&mut grads[*a], g),
                Op::Permute { a, axes } => {
                    let inv = kernels::inverse_permutation(axes);
                    let (_, dx) = kernels::permute(node.value.shape(), &g, &inv);
                    accumulate(&mut grads[*a], dx);
                }
                Op::Softmax { a } => {
                    let w = *node.value.shape().last().unwrap();
                    let mut dx = vec![0.0; g.len()];
                    for ((grow, yrow), drow) in g.chunks(w).zip(y.chunks(w)).zip(dx.chunks_mut(w)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut grads[*a], dx);
                }
                Op::LogSoftmax { a } => {
                    let w = *node.value.shape().last().unwrap();
                    let mut dx = vec![0.0; g.len()];
                    for ((grow, yrow), drow) in g.chunks(w).zip(y.chunks(w)).zip(dx.chunks_mut(w)) {
                        let total: f64 = grow.iter().sum();
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = gi - yi.exp() * total;
                        }
                    }
                    accumulate(&mut grads[*a], dx);
                }
                Op::Standardize { a, inv_std } => {
                    let w = *node.value.shape().last().unwrap();
                    let mut dx = vec![0.0; g.len()];
                    for (((grow, yrow), drow), r) in g
                        .chunks(w)
                        .zip(y.chunks(w))
                        .zip(dx.chunks_mut(w))
                        .zip(inv_std)
                    {
                        let mg = grow.iter().sum::<f64>() / w as f64;
                        let mgy = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / w as f64;
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = r * (gi - mg - yi * mgy);
                        }
                    }
                    accumulate(&mut grads[*a], dx);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let (o, pl, p) = (geom.out_ch, geom.patch_len(), geom.positions());
                    let img = geom.in_ch * geom.h * geom.w;
                    if need(*w) {
                        let mut dw = vec![0.0; o * pl];
                        for bi in 0..geom.batch {
                            kernels::gemm_nt(
                                o,
                                p,
                                pl,
                                &g[bi * o * p..(bi + 1) * o * p],
                                &cols[bi * pl * p..(bi + 1) * pl * p],
                                &mut dw,
                            );
                        }
                        accumulate(&mut grads[*w], dw);
                    }
                    if need(*b) {
                        let mut db = vec![0.0; o];
                        for (i, gi) in g.iter().enumerate() {
                            db[(i / p) % o] += gi;
                        }
                        accumulate(&mut grads[*b], db);
                    }
                    if need(*x) {
                        let wv = val(*w).data();
                        let mut dx = vec![0.0; geom.batch * img];
                        let mut dcols = vec![0.0; pl * p];
                        for bi in 0..geom.batch {
                            dcols.iter_mut().for_each(|v| *v = 0.0);
                            kernels::gemm_tn(o, pl, p, wv, &g[bi * o * p..(bi + 1) * o * p], &mut dcols);
                            geom.col2im(&dcols, &mut dx[bi * img..(bi + 1) * img]);
                        }
                        accumulate(&mut grads[*x], dx);
                    }
                }
                Op::AvgPool { a, geom } => accumulate(&mut grads[*a], geom.backward(&g)),
                Op::SpectralMagnitude { a, saved } => {
                    accumulate(&mut grads[*a], spectral::mag_backward(&g, saved));
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads {
            by_node: leaf_grads,
            shapes,
        })
    }
}

/// Elementwise `f` over two operands whose lengths divide `n`, the shorter
/// one repeating.
fn broadcast_zip(a: &[f64], b: &[f64], n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    if a.len() == n {
        for chunk in a.chunks(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    } else if b.len() == n {
        for chunk in b.chunks(a.len()) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    } else {
        out.extend((0..n).map(|i| f(a[i % a.len()], b[i % b.len()])));
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }

    fn unary_op(self, name: &'static str, kind: UnaryKind) -> Result<Var<'t>> {
        let x = self.value();
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => {
                if x.data().iter().any(|v| *v <= 0.0) {
                    return Err(Error::NumericDomain {
                        op: name,
                        detail: "log of a non-positive value".into(),
                    });
                }
                f64::ln
            }
            UnaryKind::Sqrt => {
                if x.data().iter().any(|v| *v < 0.0) {
                    return Err(Error::NumericDomain {
                        op: name,
                        detail: "sqrt of a negative value".into(),
                    });
                }
                f64::sqrt
            }
            UnaryKind::Square => |v| v * v,
            UnaryKind::Relu => |v: f64| v.max(0.0),
            UnaryKind::Gelu => kernels::gelu,
            UnaryKind::Abs => f64::abs,
        };
        let out = x.map(f);
        self.tape.push_checked(
            name,
            out,
            Op::Unary { kind, a: self.id },
            self.requires_grad(),
        )
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary_op("exp", UnaryKind::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary_op("log", UnaryKind::Log)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary_op("sqrt", UnaryKind::Sqrt)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary_op("square", UnaryKind::Square)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary_op("relu", UnaryKind::Relu)
    }

    /// tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary_op("gelu", UnaryKind::Gelu)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary_op("abs", UnaryKind::Abs)
    }

    fn binary_op(self, name: &'static str, kind: BinaryKind, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let n = numel(&shape);
        let (ad, bd) = (a.data(), b.data());
        if kind == BinaryKind::Div && bd.iter().any(|v| *v == 0.0) {
            return Err(Error::NumericDomain {
                op: name,
                detail: "division by zero".into(),
            });
        }
        let data = match kind {
            BinaryKind::Add => broadcast_zip(ad, bd, n, |x, y| x + y),
            BinaryKind::Sub => broadcast_zip(ad, bd, n, |x, y| x - y),
            BinaryKind::Mul => broadcast_zip(ad, bd, n, |x, y| x * y),
            BinaryKind::Div => broadcast_zip(ad, bd, n, |x, y| x / y),
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push_checked(
            name,
            Tensor::from_parts(shape, data),
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            rg,
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op("add", BinaryKind::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op("sub", BinaryKind::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op("mul", BinaryKind::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op("div", BinaryKind::Div, other)
    }

    /// Multiply by a constant.
    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * c);
        self.tape
            .push_checked("scale", out, Op::Scale { a: self.id, c }, self.requires_grad())
    }

    /// Add a constant.
    pub fn offset(self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v + c);
        self.tape
            .push_checked("offset", out, Op::Offset { a: self.id }, self.requires_grad())
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let plan = MatmulPlan::new(a.shape(), b.shape())?;
        let out = Tensor::from_parts(plan.out_shape.clone(), plan.forward(a.data(), b.data()));
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push_checked(
            "matmul",
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                plan,
            },
            rg,
        )
    }

    fn reduce(self, kind: ReduceKind, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (out_shape, map) = kernels::reduce_map(x.shape(), axes)?;
        let n_out = numel(&out_shape);
        let count = if n_out == 0 { 0 } else { x.numel() / n_out };
        let mut out = match kind {
            ReduceKind::Max => vec![f64::NEG_INFINITY; n_out],
            _ => vec![0.0; n_out],
        };
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for (v, &o) in x.data().iter().zip(&map) {
                    out[o] += v;
                }
                if kind == ReduceKind::Mean {
                    out.iter_mut().for_each(|v| *v /= count as f64);
                }
            }
            ReduceKind::Max => {
                argmax = vec![0; n_out];
                for (i, (v, &o)) in x.data().iter().zip(&map).enumerate() {
                    if *v > out[o] {
                        out[o] = *v;
                        argmax[o] = i;
                    }
                }
            }
        }
        self.tape.push_checked(
            "reduce",
            Tensor::from_parts(out_shape, out),
            Op::Reduce {
                kind,
                a: self.id,
                map,
                argmax,
                count,
            },
            self.requires_grad(),
        )
    }

    /// Sum over `axes`, which are removed from the shape.
    pub fn sum(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, axes)
    }

    pub fn mean(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean, axes)
    }

    pub fn max(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Max, axes)
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes)
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape.to_vec())?;
        Ok(self
            .tape
            .push(out, Op::Reshape { a: self.id }, self.requires_grad()))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let out = self.value().permute(axes)?;
        Ok(self.tape.push(
            out,
            Op::Permute {
                a: self.id,
                axes: axes.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// `(B, C, H, W)` grid to `(B, H*W, C)` tokens; token `h*W + w` carries
    /// the channel vector at `(h, w)`.
    pub fn grid_to_seq(self) -> Result<Var<'t>> {
        let s = self.shape();
        Layout::Grid.check_rank(&s)?;
        self.permute(&[0, 2, 3, 1])?.reshape(&[s[0], s[2] * s[3], s[1]])
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let w = *x.shape().last().ok_or_else(|| Error::contract("softmax of rank-0"))?;
        let out = Tensor::from_parts(x.shape().to_vec(), kernels::softmax_rows(x.data(), w, false));
        self.tape
            .push_checked("softmax", out, Op::Softmax { a: self.id }, self.requires_grad())
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let w = *x.shape().last().ok_or_else(|| Error::contract("log_softmax of rank-0"))?;
        let out = Tensor::from_parts(x.shape().to_vec(), kernels::softmax_rows(x.data(), w, true));
        self.tape.push_checked(
            "log_softmax",
            out,
            Op::LogSoftmax { a: self.id },
            self.requires_grad(),
        )
    }

    /// Zero-mean, unit-variance rows along the last axis (no affine).
    pub fn standardize(self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let w = *x.shape().last().ok_or_else(|| Error::contract("standardize of rank-0"))?;
        let (y, inv_std) = kernels::standardize_rows(x.data(), w, eps);
        self.tape.push_checked(
            "standardize",
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::Standardize {
                a: self.id,
                inv_std,
            },
            self.requires_grad(),
        )
    }

    /// 2-D convolution of `(B, C, H, W)` with `weight (O, C, kh, kw)` plus
    /// `bias (O)`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        self.same_tape(&bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
        if b.shape() != [geom.out_ch] {
            return Err(Error::shape("conv2d bias", b.shape(), &[geom.out_ch]));
        }
        let (o, pl, p) = (geom.out_ch, geom.patch_len(), geom.positions());
        let img = geom.in_ch * geom.h * geom.w;
        let mut cols = vec![0.0; geom.batch * pl * p];
        let mut out = vec![0.0; geom.batch * o * p];
        for bi in 0..geom.batch {
            let c = &mut cols[bi * pl * p..(bi + 1) * pl * p];
            geom.im2col(&x.data()[bi * img..(bi + 1) * img], c);
            let ob = &mut out[bi * o * p..(bi + 1) * o * p];
            for (oc, row) in ob.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = b.data()[oc]);
            }
            kernels::gemm_nn(o, pl, p, w.data(), c, ob);
        }
        let shape = vec![geom.batch, o, geom.oh, geom.ow];
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        self.tape.push_checked(
            "conv2d",
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Mean pooling over the layout's transformed axes.
    pub fn avg_pool(self, layout: Layout, factor: usize) -> Result<Var<'t>> {
        let x = self.value();
        let geom = PoolGeom::new(x.shape(), layout, factor)?;
        let out = Tensor::from_parts(geom.out_shape.clone(), geom.forward(x.data()));
        Ok(self
            .tape
            .push(out, Op::AvgPool { a: self.id, geom }, self.requires_grad()))
    }

    /// Centered magnitude spectrum over the layout's transformed axes, with
    /// the zero-padding policy of [`crate::spectral`].
    pub fn spectral_magnitude(self, layout: Layout) -> Result<Var<'t>> {
        let (out, saved) = spectral::mag_forward(&self.value(), layout)?;
        self.tape.push_checked(
            "spectral_magnitude",
            out,
            Op::SpectralMagnitude {
                a: self.id,
                saved: Box::new(saved),
            },
            self.requires_grad(),
        )
    }
}
