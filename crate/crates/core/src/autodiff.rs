//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Values
//! are computed eagerly on the forward pass; [`Tape::backward`] replays the
//! tape in reverse and returns a [`Gradients`] map for every leaf that was
//! created with `requires_grad`.
//!
//! Broadcasting is limited to scalar operands (a tensor with one element)
//! in the elementwise binary ops, plus the explicit row-bias op
//! [`Var::add_row`].
//!
//! Tapes use interior mutability and are intentionally `!Sync`: one tape per
//! thread, one thread per tape.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Operation kinds, as recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Matmul,
    AddRow,
    Relu,
    Tanh,
    Sigmoid,
    SoftClip,
    Square,
    Sqrt,
    Sum,
    Mean,
    SumRows,
    L2Norm,
    NormalizeRows,
    Concat,
    Reshape,
    Slice,
    CrossEntropy,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    AddRow(usize, usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    SoftClip(usize, f64),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    L2Norm(usize),
    NormalizeRows(usize, Tensor),
    Concat(Vec<usize>, usize),
    Reshape(usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::Matmul(..) => OpKind::Matmul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::SoftClip(..) => OpKind::SoftClip,
            Op::Square(_) => OpKind::Square,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumRows(_) => OpKind::SumRows,
            Op::L2Norm(_) => OpKind::L2Norm,
            Op::NormalizeRows(..) => OpKind::NormalizeRows,
            Op::Concat(..) => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Slice { .. } => OpKind::Slice,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
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

    /// Record a leaf. Gradients are reported only for leaves with
    /// `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_unchecked(Op::Leaf, value, requires_grad)
    }

    /// Leaf that participates in differentiation.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push_unchecked(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name(op.kind())));
        }
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn kind_of(&self, var: Var<'_>) -> OpKind {
        self.nodes.borrow()[var.id].op.kind()
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::DetachedRoot);
        }
        let nodes = self.nodes.borrow();
        let root_node = nodes.get(root.id).ok_or(Error::DetachedRoot)?;
        if root_node.value.numel() != 1 {
            return Err(Error::NotScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(root_node.value.shape()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.requires_grad => {
                    Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self as *const Tape as usize,
            grads,
        })
    }
}

/// Gradients of a scalar root with respect to every `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        if var.tape as *const Tape as usize != self.tape {
            return None;
        }
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, moved out of the map.
    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        if var.tape as *const Tape as usize != self.tape {
            return None;
        }
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Reduce an elementwise gradient back onto a possibly broadcast operand.
fn unbroadcast(g: Tensor, operand: &Tensor) -> Tensor {
    if g.shape() == operand.shape() {
        g
    } else {
        Tensor::full(operand.shape(), g.sum())
    }
}

/// `value` at broadcast position `i`.
#[inline]
fn bget(t: &Tensor, i: usize) -> f64 {
    let d = t.data();
    if d.len() == 1 {
        d[0]
    } else {
        d[i]
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            if wants(a) {
                accumulate(&mut grads[a], unbroadcast(g.clone(), val(a)));
            }
            if wants(b) {
                accumulate(&mut grads[b], unbroadcast(g.clone(), val(b)));
            }
        }
        &Op::Sub(a, b) => {
            if wants(a) {
                accumulate(&mut grads[a], unbroadcast(g.clone(), val(a)));
            }
            if wants(b) {
                accumulate(&mut grads[b], unbroadcast(g.scale(-1.0), val(b)));
            }
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            if wants(a) {
                let ga = Tensor::from_fn(g.shape(), |i| g.data()[i] * bget(vb, i));
                accumulate(&mut grads[a], unbroadcast(ga, va));
            }
            if wants(b) {
                let gb = Tensor::from_fn(g.shape(), |i| g.data()[i] * bget(va, i));
                accumulate(&mut grads[b], unbroadcast(gb, vb));
            }
        }
        &Op::Div(a, b) => {
            let (va, vb) = (val(a), val(b));
            if wants(a) {
                let ga = Tensor::from_fn(g.shape(), |i| g.data()[i] / bget(vb, i));
                accumulate(&mut grads[a], unbroadcast(ga, va));
            }
            if wants(b) {
                let gb = Tensor::from_fn(g.shape(), |i| {
                    let d = bget(vb, i);
                    -g.data()[i] * bget(va, i) / (d * d)
                });
                accumulate(&mut grads[b], unbroadcast(gb, vb));
            }
        }
        &Op::Scale(a, c) => {
            if wants(a) {
                accumulate(&mut grads[a], g.scale(c));
            }
        }
        &Op::Matmul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let nn = vb.shape()[1];
            if wants(a) {
                // dA = G · Bᵀ
                let mut da = vec![0.0; m * k];
                gemm(m, nn, k, g.data(), (nn, 1), vb.data(), (1, nn), &mut da);
                accumulate(&mut grads[a], Tensor::new(vec![m, k], da).unwrap());
            }
            if wants(b) {
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * nn];
                gemm(k, m, nn, va.data(), (1, k), g.data(), (nn, 1), &mut db);
                accumulate(&mut grads[b], Tensor::new(vec![k, nn], db).unwrap());
            }
        }
        &Op::AddRow(a, b) => {
            if wants(a) {
                accumulate(&mut grads[a], g.clone());
            }
            if wants(b) {
                let cols = val(b).numel();
                let mut gb = vec![0.0; cols];
                for row in g.data().chunks_exact(cols) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(&mut grads[b], Tensor::new(val(b).shape().to_vec(), gb).unwrap());
            }
        }
        &Op::Relu(a) => {
            if wants(a) {
                let x = val(a);
                let ga = Tensor::from_fn(x.shape(), |i| {
                    if x.data()[i] > 0.0 {
                        g.data()[i]
                    } else {
                        0.0
                    }
                });
                accumulate(&mut grads[a], ga);
            }
        }
        &Op::Tanh(a) => {
            if wants(a) {
                let y = &node.value;
                let ga = Tensor::from_fn(y.shape(), |i| {
                    let t = y.data()[i];
                    g.data()[i] * (1.0 - t * t)
                });
                accumulate(&mut grads[a], ga);
            }
        }
        &Op::Sigmoid(a) => {
            if wants(a) {
                let y = &node.value;
                let ga = Tensor::from_fn(y.shape(), |i| {
                    let s = y.data()[i];
                    g.data()[i] * s * (1.0 - s)
                });
                accumulate(&mut grads[a], ga);
            }
        }
        &Op::SoftClip(a, margin) => {
            if wants(a) {
                let x = val(a);
                let ga = Tensor::from_fn(x.shape(), |i| {
                    g.data()[i] * soft_clip_grad(x.data()[i], margin)
                });
                accumulate(&mut grads[a], ga);
            }
        }
        &Op::Square(a) => {
            if wants(a) {
                let x = val(a);
                let ga = Tensor::from_fn(x.shape(), |i| 2.0 * x.data()[i] * g.data()[i]);
                accumulate(&mut grads[a], ga);
            }
        }
        &Op::Sqrt(a) => {
            if wants(a) {
                let y = &node.value;
                // Subgradient 0 at the origin.
                let ga = Tensor::from_fn(y.shape(), |i| {
                    let s = y.data()[i];
                    if s > 0.0 {
                        0.5 * g.data()[i] / s
                    } else {
                        0.0
                    }
                });
                accumulate(&mut grads[a], ga);
            }
        }
        &Op::Sum(a) => {
            if wants(a) {
                accumulate(&mut grads[a], Tensor::full(val(a).shape(), g.item()));
            }
        }
        &Op::Mean(a) => {
            if wants(a) {
                let x = val(a);
                let c = g.item() / x.numel() as f64;
                accumulate(&mut grads[a], Tensor::full(x.shape(), c));
            }
        }
        &Op::SumRows(a) => {
            if wants(a) {
                let x = val(a);
                let cols = x.shape()[1];
                let ga = Tensor::from_fn(x.shape(), |i| g.data()[i / cols]);
                accumulate(&mut grads[a], ga);
            }
        }
        &Op::L2Norm(a) => {
            if wants(a) {
                let x = val(a);
                let norms = &node.value;
                let cols = row_len(x);
                let ga = Tensor::from_fn(x.shape(), |i| {
                    let r = norms.data()[i / cols];
                    if r > 0.0 {
                        g.data()[i / cols] * x.data()[i] / r
                    } else {
                        0.0
                    }
                });
                accumulate(&mut grads[a], ga);
            }
        }
        Op::NormalizeRows(a, norms) => {
            let a = *a;
            if wants(a) {
                let y = &node.value;
                let cols = row_len(y);
                let mut ga = vec![0.0; y.numel()];
                for (r, ((gy, yy), out)) in g
                    .data()
                    .chunks_exact(cols)
                    .zip(y.data().chunks_exact(cols))
                    .zip(ga.chunks_exact_mut(cols))
                    .enumerate()
                {
                    let dot: f64 = gy.iter().zip(yy).map(|(p, q)| p * q).sum();
                    let inv = 1.0 / norms.data()[r];
                    for j in 0..cols {
                        out[j] = (gy[j] - yy[j] * dot) * inv;
                    }
                }
                accumulate(&mut grads[a], Tensor::new(val(a).shape().to_vec(), ga).unwrap());
            }
        }
        Op::Concat(inputs, axis) => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let x = val(inp);
                let len = x.shape()[*axis];
                if wants(inp) {
                    let mut gi = Vec::with_capacity(x.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    accumulate(&mut grads[inp], Tensor::new(x.shape().to_vec(), gi).unwrap());
                }
                offset += len;
            }
        }
        &Op::Reshape(a) => {
            if wants(a) {
                let ga = g.clone().reshape(val(a).shape()).unwrap();
                accumulate(&mut grads[a], ga);
            }
        }
        &Op::Slice { input, axis, start } => {
            if wants(input) {
                let x = val(input);
                let outer: usize = x.shape()[..axis].iter().product();
                let inner: usize = x.shape()[axis + 1..].iter().product();
                let full = x.shape()[axis];
                let len = node.value.shape()[axis];
                let mut gi = vec![0.0; x.numel()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * full + start) * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                accumulate(&mut grads[input], Tensor::new(x.shape().to_vec(), gi).unwrap());
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let logits = *logits;
            if wants(logits) {
                let rows = labels.len();
                let cols = probs.shape()[1];
                let scale = g.item() / rows as f64;
                let mut gl = probs.data().to_vec();
                for (r, &lab) in labels.iter().enumerate() {
                    gl[r * cols + lab] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                accumulate(&mut grads[logits], Tensor::new(vec![rows, cols], gl).unwrap());
            }
        }
    }
}

fn row_len(t: &Tensor) -> usize {
    match t.rank() {
        0 => 1,
        _ => *t.shape().last().unwrap(),
    }
}

fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Div => "div",
        OpKind::Scale => "scale",
        OpKind::Matmul => "matmul",
        OpKind::AddRow => "add_row",
        OpKind::Relu => "relu",
        OpKind::Tanh => "tanh",
        OpKind::Sigmoid => "sigmoid",
        OpKind::SoftClip => "soft_clip",
        OpKind::Square => "square",
        OpKind::Sqrt => "sqrt",
        OpKind::Sum => "sum",
        OpKind::Mean => "mean",
        OpKind::SumRows => "sum_rows",
        OpKind::L2Norm => "l2norm",
        OpKind::NormalizeRows => "normalize_rows",
        OpKind::Concat => "concat",
        OpKind::Reshape => "reshape",
        OpKind::Slice => "slice",
        OpKind::CrossEntropy => "cross_entropy",
    }
}

/// `c = a · b` for row/column-strided `a` (m×k) and `b` (k×n); `c` is
/// contiguous m×n and overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above keep every strided access inside `a`, `b`
    // and `c`, and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Smooth clip to the open unit interval: identity on `[margin, 1 - margin]`
/// with `tanh` shoulders outside, continuous through the first derivative.
pub fn soft_clip(x: f64, margin: f64) -> f64 {
    let hi = 1.0 - margin;
    if x > hi {
        hi + margin * ((x - hi) / margin).tanh()
    } else if x < margin {
        margin + margin * ((x - margin) / margin).tanh()
    } else {
        x
    }
}

fn soft_clip_grad(x: f64, margin: f64) -> f64 {
    let hi = 1.0 - margin;
    let shoulder = |u: f64| {
        let t = u.tanh();
        1.0 - t * t
    };
    if x > hi {
        shoulder((x - hi) / margin)
    } else if x < margin {
        shoulder((x - margin) / margin)
    } else {
        1.0
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.with_value(|v| v.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes combined"
        );
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = self.with_value(f)?;
        let rg = self.requires_grad();
        self.tape.push(op, value, rg)
    }

    fn elementwise(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() == b.shape() {
                a.zip_with(b, &f)?
            } else if b.numel() == 1 {
                let s = b.data()[0];
                a.map(|x| f(x, s))
            } else if a.numel() == 1 {
                let s = a.data()[0];
                b.map(|y| f(s, y))
            } else {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(op, value, rg)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, c), |x| Ok(x.scale(c)))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            };
            if k != k2 {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut c);
            Tensor::new(vec![m, n], c)?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(Op::Matmul(self.id, other.id), value, rg)
    }

    /// Add a bias vector `[n]` to every row of an `[m, n]` tensor.
    pub fn add_row(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            let (&[_, n], &[n2]) = (a.shape(), b.shape()) else {
                return Err(Error::shape("add_row", a.shape(), b.shape()));
            };
            if n != n2 {
                return Err(Error::shape("add_row", a.shape(), b.shape()));
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_exact_mut(n) {
                for (v, bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            out
        };
        let rg = self.tape.requires(&[self.id, bias.id]);
        self.tape.push(Op::AddRow(self.id, bias.id), value, rg)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), |x| Ok(x.map(|v| v.max(0.0))))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary(Op::Tanh(self.id), |x| Ok(x.map(f64::tanh)))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid(self.id), |x| {
            Ok(x.map(|v| 1.0 / (1.0 + (-v).exp())))
        })
    }

    /// Elementwise [`soft_clip`].
    pub fn soft_clip(&self, margin: f64) -> Result<Var<'t>> {
        self.unary(Op::SoftClip(self.id, margin), |x| {
            Ok(x.map(|v| soft_clip(v, margin)))
        })
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary(Op::Square(self.id), |x| Ok(x.map(|v| v * v)))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.unary(Op::Sqrt(self.id), |x| Ok(x.map(f64::sqrt)))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary(Op::Sum(self.id), |x| Ok(Tensor::scalar(x.sum())))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.unary(Op::Mean(self.id), |x| Ok(Tensor::scalar(x.mean())))
    }

    /// Row sums of an `[m, n]` tensor, giving `[m]`.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        self.unary(Op::SumRows(self.id), |x| {
            let &[m, n] = x.shape() else {
                return Err(Error::shape("sum_rows", x.shape(), &[0, 0]));
            };
            let sums = x.data().chunks_exact(n.max(1)).map(|r| r.iter().sum()).collect();
            Tensor::new(vec![m], sums)
        })
    }

    /// Euclidean norm: rank-1 input gives a rank-0 result, rank-2 input gives
    /// one norm per row.
    pub fn l2norm(&self) -> Result<Var<'t>> {
        self.unary(Op::L2Norm(self.id), |x| {
            let (shape, cols) = match x.shape() {
                &[n] => (vec![], n),
                &[m, n] => (vec![m], n),
                s => return Err(Error::shape("l2norm", s, &[0])),
            };
            let norms = x
                .data()
                .chunks_exact(cols.max(1))
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            Tensor::new(shape, norms)
        })
    }

    /// Scale each row (or the whole vector, for rank 1) to unit length.
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        let (value, norms) = self.with_value(|x| {
            let cols = match x.shape() {
                &[n] => n,
                &[_, n] => n,
                s => return Err(Error::shape("normalize_rows", s, &[0])),
            };
            let mut out = x.clone();
            let mut norms = Vec::with_capacity(x.numel() / cols.max(1));
            for row in out.data_mut().chunks_exact_mut(cols.max(1)) {
                let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                norms.push(r);
                row.iter_mut().for_each(|v| *v /= r);
            }
            let len = norms.len();
            Ok((out, Tensor::new(vec![len], norms)?))
        })?;
        let rg = self.requires_grad();
        self.tape
            .push(Op::NormalizeRows(self.id, norms), value, rg)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Reshape(self.id), |x| x.clone().reshape(shape))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        self.unary(
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            |x| {
                if axis >= x.rank() || start > end || end > x.shape()[axis] {
                    return Err(Error::shape("slice", x.shape(), &[axis, start, end]));
                }
                let outer: usize = x.shape()[..axis].iter().product();
                let inner: usize = x.shape()[axis + 1..].iter().product();
                let full = x.shape()[axis];
                let mut data = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    data.extend_from_slice(&x.data()[s..s + (end - start) * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[axis] = end - start;
                Tensor::new(shape, data)
            },
        )
    }

    /// Mean softmax cross-entropy of `[m, c]` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = self.with_value(|x| {
            let &[m, c] = x.shape() else {
                return Err(Error::shape("cross_entropy", x.shape(), &[labels.len(), 0]));
            };
            if m != labels.len() || labels.iter().any(|&l| l >= c) {
                return Err(Error::shape("cross_entropy", x.shape(), &[labels.len(), c]));
            }
            let mut probs = Vec::with_capacity(m * c);
            let mut loss = 0.0;
            for (row, &lab) in x.data().chunks_exact(c).zip(labels) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                let log_z = z.ln() + mx;
                loss += log_z - row[lab];
                probs.extend(row.iter().map(|v| (v - log_z).exp()));
            }
            Ok((loss / m as f64, Tensor::new(vec![m, c], probs)?))
        })?;
        let rg = self.requires_grad();
        self.tape.push(
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        )
    }
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat<'t>(inputs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat", &[], &[]))?;
    let tape = first.tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let vals: Vec<&Tensor> = inputs
            .iter()
            .map(|v| {
                first.same_tape(v);
                &nodes[v.id].value
            })
            .collect();
        let base = vals[0].shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", base, &[axis]));
        }
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        Tensor::new(shape, data)?
    };
    let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
    let rg = tape.requires(&ids);
    tape.push(Op::Concat(ids, axis), value, rg)
}
