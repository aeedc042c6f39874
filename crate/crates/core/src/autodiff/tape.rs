use std::cell::RefCell;
use std::fmt;

use serde::Serialize;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Probabilities are floored to this value before taking logarithms in
/// [`Var::kl_divergence`].
pub const KL_FLOOR: f64 = 1e-8;

/// Numerical floor on row norms in [`Var::l2_normalize_rows`].
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MatMul(usize, usize),
    Bmm { a: usize, b: usize, transpose_b: bool },
    Transpose(usize),
    Reshape(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Concat(Vec<usize>, usize),
    TileRows(usize, usize),
    SelectRows(usize, Vec<usize>),
    RowOuter(usize, usize),
    L2NormalizeRows(usize),
    KlDivergence(usize, usize),
    Mse(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MatMul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Concat(..) => "concat",
            Op::TileRows(..) => "tile_rows",
            Op::SelectRows(..) => "select_rows",
            Op::RowOuter(..) => "row_outer",
            Op::L2NormalizeRows(_) => "l2_normalize_rows",
            Op::KlDivergence(..) => "kl_divergence",
            Op::Mse(..) => "mse",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::Bmm { a, b, .. }
            | Op::RowOuter(a, b)
            | Op::KlDivergence(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::TileRows(a, _)
            | Op::SelectRows(a, _)
            | Op::L2NormalizeRows(a) => vec![*a],
            Op::Concat(ids, _) => ids.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    kl_floor_hits: usize,
}

/// Record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// outputs. A tape supports one backward pass; calling [`Var::backward`]
/// again is rejected until [`Tape::clear_grads`] is called, after which a
/// repeated pass produces identical gradients.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Diagnostics gathered while building a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeDiagnostics {
    /// Number of probabilities raised to [`KL_FLOOR`] inside KL terms.
    pub kl_floor_hits: usize,
}

/// One entry of the JSON tape dump.
#[derive(Clone, Debug, Serialize)]
pub struct TapeRecord {
    pub op: &'static str,
    pub input_ids: Vec<usize>,
    pub output_id: usize,
    /// Input shapes followed by the output shape.
    pub shapes: Vec<Vec<usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that accumulates gradient when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn diagnostics(&self) -> TapeDiagnostics {
        TapeDiagnostics {
            kl_floor_hits: self.inner.borrow().kl_floor_hits,
        }
    }

    /// Drops gradients from a previous backward pass so that another pass
    /// may run.
    pub fn clear_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.clear();
        inner.backward_done = false;
    }

    pub fn records(&self) -> Vec<TapeRecord> {
        let inner = self.inner.borrow();
        inner
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| {
                let input_ids = node.op.inputs();
                let mut shapes: Vec<Vec<usize>> = input_ids
                    .iter()
                    .map(|&i| inner.nodes[i].value.shape().to_vec())
                    .collect();
                shapes.push(node.value.shape().to_vec());
                TapeRecord {
                    op: node.op.name(),
                    input_ids,
                    output_id: id,
                    shapes,
                }
            })
            .collect()
    }

    pub fn dump_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.records())?)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn push_op(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var<'_>> {
        let name = op.name();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of {name} at flat index {i}")));
        }
        let requires_grad = {
            let inner = self.inner.borrow();
            op.inputs().iter().any(|&i| inner.nodes[i].requires_grad)
        };
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn with_value<T>(&self, id: usize, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.inner.borrow().nodes[id].value)
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, with optional transposes of the operands.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    out: &mut [f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    a_t: bool,
    b_t: bool,
) {
    if b_t && !a_t {
        // Row-by-row dot products keep both operands contiguous.
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for (j, o) in out[i * n..(i + 1) * n].iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                *o += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        return;
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if a_t { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            if b_t {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, k, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * k * inner + j * inner + i;
            let max = (0..k).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..k {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..k {
                out[at(j)] /= total;
            }
        }
    }
    out
}

fn log_softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, k, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * k * inner + j * inner + i;
            let max = (0..k).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|j| (x[at(j)] - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                out[at(j)] = x[at(j)] - lse;
            }
        }
    }
    out
}

fn check_distribution_rows(op: &'static str, t: &Tensor) -> Result<()> {
    let k = t.cols();
    for (r, row) in t.data().chunks(k).enumerate() {
        if row.iter().any(|&v| v < 0.0) {
            return Err(Error::contract(format!("{op}: negative probability in row {r}")));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "{op}: row {r} sums to {total}, expected 1"
            )));
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn item(&self) -> Result<f64> {
        self.tape.with_value(self.id, Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Gradient accumulated by the last backward pass. `None` for nodes
    /// that do not require gradients; zeros for nodes the loss does not
    /// depend on.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        if !node.requires_grad || !inner.backward_done {
            return None;
        }
        let shape = node.value.shape().to_vec();
        let data = inner
            .grads
            .get(self.id)
            .and_then(Clone::clone)
            .unwrap_or_else(|| vec![0.0; node.value.len()]);
        Some(Tensor::from_parts(shape, data))
    }

    /// Copy of this node's value with no gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let (shape, data) = self.tape.with_value(self.id, |t| {
            (t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        });
        self.tape.push_op(shape, data, op)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (shape, data) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            check_same_shape(name, a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            (a.shape().to_vec(), data)
        };
        self.tape.push_op(shape, data, op)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::MulScalar(self.id, c), |v| v * c)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural logarithm; non-positive inputs are a domain error.
    pub fn log(&self) -> Result<Var<'t>> {
        let bad = self
            .tape
            .with_value(self.id, |t| t.data().iter().any(|&v| v <= 0.0));
        if bad {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let total = self.tape.with_value(self.id, |t| t.data().iter().sum());
        self.tape.push_op(vec![], vec![total], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let mean = self
            .tape
            .with_value(self.id, |t| t.data().iter().sum::<f64>() / t.len() as f64);
        self.tape.push_op(vec![], vec![mean], Op::Mean(self.id))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let (shape, data) = self.tape.with_value(self.id, |t| {
            let shape = t.shape();
            if axis >= shape.len() {
                return Err(Error::shape("sum_axis", format!("axis {axis} of {shape:?}")));
            }
            let (outer, k, inner) = axis_split(shape, axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..k {
                    for i in 0..inner {
                        out[o * inner + i] += t.data()[o * k * inner + j * inner + i];
                    }
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape.remove(axis);
            Ok((out_shape, out))
        })?;
        self.tape.push_op(shape, data, Op::SumAxis(self.id, axis))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let extent = self.shape().get(axis).copied().unwrap_or(1);
        self.sum_axis(axis)?.mul_scalar(1.0 / extent as f64)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (shape, data) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let (m, k) = matrix_dims("matmul", a)?;
            let (k2, n) = matrix_dims("matmul", b)?;
            if k != k2 {
                return Err(Error::shape("matmul", format!("{m}x{k} by {k2}x{n}")));
            }
            let mut out = vec![0.0; m * n];
            gemm_acc(&mut out, a.data(), b.data(), m, k, n, false, false);
            (vec![m, n], out)
        };
        self.tape.push_op(shape, data, Op::MatMul(self.id, other.id))
    }

    /// Batched product of `[B×m×k]` with `[B×k×n]`, or with `[B×n×k]`
    /// transposed per batch when `transpose_b` is set.
    pub fn bmm(&self, other: &Var<'t>, transpose_b: bool) -> Result<Var<'t>> {
        let (shape, data) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let (&[ba, m, k], &[bb, b1, b2]) = (a.shape(), b.shape()) else {
                return Err(Error::shape(
                    "bmm",
                    format!("expected rank-3 operands, got {:?} and {:?}", a.shape(), b.shape()),
                ));
            };
            let (kb, n) = if transpose_b { (b2, b1) } else { (b1, b2) };
            if ba != bb || k != kb {
                return Err(Error::shape(
                    "bmm",
                    format!("{:?} by {:?} (transpose_b={transpose_b})", a.shape(), b.shape()),
                ));
            }
            let mut out = vec![0.0; ba * m * n];
            for batch in 0..ba {
                gemm_acc(
                    &mut out[batch * m * n..(batch + 1) * m * n],
                    &a.data()[batch * m * k..(batch + 1) * m * k],
                    &b.data()[batch * k * n..(batch + 1) * k * n],
                    m,
                    k,
                    n,
                    false,
                    transpose_b,
                );
            }
            (vec![ba, m, n], out)
        };
        self.tape.push_op(
            shape,
            data,
            Op::Bmm {
                a: self.id,
                b: other.id,
                transpose_b,
            },
        )
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (shape, data) = self.tape.with_value(self.id, |t| {
            let (r, c) = matrix_dims("transpose", t)?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = t.data()[i * c + j];
                }
            }
            Ok::<_, Error>((vec![c, r], out))
        })?;
        self.tape.push_op(shape, data, Op::Transpose(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let data = self.tape.with_value(self.id, |t| {
            if numel(shape) != t.len() || shape.contains(&0) {
                return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", t.shape())));
            }
            Ok(t.data().to_vec())
        })?;
        self.tape.push_op(shape.to_vec(), data, Op::Reshape(self.id))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let (shape, data) = self.tape.with_value(self.id, |t| {
            if axis >= t.shape().len() {
                return Err(Error::shape("softmax", format!("axis {axis} of {:?}", t.shape())));
            }
            Ok((t.shape().to_vec(), softmax_forward(t.data(), t.shape(), axis)))
        })?;
        self.tape.push_op(shape, data, Op::Softmax(self.id, axis))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let (shape, data) = self.tape.with_value(self.id, |t| {
            if axis >= t.shape().len() {
                return Err(Error::shape(
                    "log_softmax",
                    format!("axis {axis} of {:?}", t.shape()),
                ));
            }
            Ok((t.shape().to_vec(), log_softmax_forward(t.data(), t.shape(), axis)))
        })?;
        self.tape.push_op(shape, data, Op::LogSoftmax(self.id, axis))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tape = first.tape;
        let (shape, data) = {
            let inner = tape.inner.borrow();
            let values: Vec<&Tensor> = parts.iter().map(|p| &inner.nodes[p.id].value).collect();
            let base = values[0].shape();
            if axis >= base.len() {
                return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
            }
            let mut extent = 0;
            for v in &values {
                let s = v.shape();
                let compatible = s.len() == base.len()
                    && s.iter()
                        .zip(base)
                        .enumerate()
                        .all(|(d, (x, y))| d == axis || x == y);
                if !compatible {
                    return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
                }
                extent += s[axis];
            }
            let (outer, _, inner_len) = axis_split(base, axis);
            let mut out = Vec::with_capacity(outer * extent * inner_len);
            for o in 0..outer {
                for v in &values {
                    let block = v.shape()[axis] * inner_len;
                    out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = base.to_vec();
            shape[axis] = extent;
            (shape, out)
        };
        tape.push_op(shape, data, Op::Concat(parts.iter().map(|p| p.id).collect(), axis))
    }

    /// Stacks `n` copies of a `[R×C]` matrix (or a `[C]` vector as one row)
    /// into `[n·R × C]`.
    pub fn tile_rows(&self, n: usize) -> Result<Var<'t>> {
        let (shape, data) = self.tape.with_value(self.id, |t| {
            let (r, c) = match t.shape() {
                [c] => (1, *c),
                [r, c] => (*r, *c),
                s => return Err(Error::shape("tile_rows", format!("rank of {s:?}"))),
            };
            if n == 0 {
                return Err(Error::shape("tile_rows", "zero copies"));
            }
            Ok((vec![n * r, c], t.data().repeat(n)))
        })?;
        self.tape.push_op(shape, data, Op::TileRows(self.id, n))
    }

    /// Gathers rows of a matrix; gradients scatter back additively.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let (shape, data) = self.tape.with_value(self.id, |t| {
            let (r, c) = matrix_dims("select_rows", t)?;
            if rows.is_empty() {
                return Err(Error::shape("select_rows", "empty selection"));
            }
            let mut out = Vec::with_capacity(rows.len() * c);
            for &i in rows {
                if i >= r {
                    return Err(Error::shape("select_rows", format!("row {i} of {r}")));
                }
                out.extend_from_slice(t.row(i));
            }
            Ok((vec![rows.len(), c], out))
        })?;
        self.tape
            .push_op(shape, data, Op::SelectRows(self.id, rows.to_vec()))
    }

    /// Per-row outer product `[B×K]`, `[B×M]` → `[B × K·M]`, flattened
    /// row-major so that entry `(a, b)` lands at column `a·M + b`.
    pub fn row_outer(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (shape, data) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let (ba, k) = matrix_dims("row_outer", a)?;
            let (bb, m) = matrix_dims("row_outer", b)?;
            if ba != bb {
                return Err(Error::shape("row_outer", format!("{ba} rows vs {bb} rows")));
            }
            let mut out = Vec::with_capacity(ba * k * m);
            for r in 0..ba {
                for &x in a.row(r) {
                    out.extend(b.row(r).iter().map(|&y| x * y));
                }
            }
            (vec![ba, k * m], out)
        };
        self.tape.push_op(shape, data, Op::RowOuter(self.id, other.id))
    }

    /// Scales each row of a matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let (shape, data) = self.tape.with_value(self.id, |t| {
            let (_, c) = matrix_dims("l2_normalize_rows", t)?;
            let mut out = Vec::with_capacity(t.len());
            for row in t.data().chunks(c) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
                out.extend(row.iter().map(|v| v / norm));
            }
            Ok::<_, Error>((t.shape().to_vec(), out))
        })?;
        self.tape.push_op(shape, data, Op::L2NormalizeRows(self.id))
    }

    /// `Σ p·(ln p − ln q)` summed over every row of `p` and `q`.
    ///
    /// Both operands are probability vectors, or row-stochastic matrices in
    /// which case the result is the sum of the per-row divergences. Terms with
    /// `p = 0` contribute zero; probabilities below [`KL_FLOOR`] are raised to
    /// it before the logarithm and counted in [`Tape::diagnostics`].
    pub fn kl_divergence(&self, q: &Var<'t>) -> Result<Var<'t>> {
        let (value, floored) = {
            let inner = self.tape.inner.borrow();
            let p = &inner.nodes[self.id].value;
            let qv = &inner.nodes[q.id].value;
            check_same_shape("kl_divergence", p, qv)?;
            if p.shape().len() > 2 {
                return Err(Error::shape("kl_divergence", format!("rank of {:?}", p.shape())));
            }
            check_distribution_rows("kl_divergence", p)?;
            check_distribution_rows("kl_divergence", qv)?;
            let mut total = 0.0;
            let mut floored = 0;
            for (&pi, &qi) in p.data().iter().zip(qv.data()) {
                if qi < KL_FLOOR && pi > 0.0 {
                    floored += 1;
                }
                if pi > 0.0 {
                    total += pi * (pi.max(KL_FLOOR).ln() - qi.max(KL_FLOOR).ln());
                }
            }
            (total, floored)
        };
        self.tape.inner.borrow_mut().kl_floor_hits += floored;
        self.tape
            .push_op(vec![], vec![value], Op::KlDivergence(self.id, q.id))
    }

    /// Mean squared difference over all entries.
    pub fn mse(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            check_same_shape("mse", a, b)?;
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / a.len() as f64
        };
        self.tape.push_op(vec![], vec![value], Op::Mse(self.id, other.id))
    }

    /// Reverse-mode pass from this scalar node.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; call clear_grads first",
            ));
        }
        let root = &inner.nodes[self.id];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);
        let nodes = &inner.nodes;
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contribution) in input_grads(nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of node {id} ({}) at flat index {i}",
                        nodes[id].op.name()
                    )));
                }
            }
        }
        inner.grads = grads;
        inner.backward_done = true;
        Ok(())
    }
}

/// Vector-Jacobian products of one node with respect to each input.
fn input_grads(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |id: usize| &nodes[id].value;
    let y = node.value.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(bv).map(|(g, b)| g / b).collect()),
                (
                    *b,
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect(),
                ),
            ]
        }
        Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::MulScalar(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
        Op::Exp(a) => vec![(*a, g.iter().zip(y).map(|(g, y)| g * y).collect())],
        Op::Log(a) => vec![(
            *a,
            g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect(),
        )],
        Op::Tanh(a) => vec![(*a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())],
        Op::Relu(a) => vec![(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Op::Square(a) => vec![(
            *a,
            g.iter().zip(val(*a).data()).map(|(g, x)| 2.0 * g * x).collect(),
        )],
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
        Op::Mean(a) => {
            let n = val(*a).len();
            vec![(*a, vec![g[0] / n as f64; n])]
        }
        Op::SumAxis(a, axis) => {
            let x = val(*a);
            let (outer, k, inner) = axis_split(x.shape(), *axis);
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for j in 0..k {
                    for i in 0..inner {
                        out[o * k * inner + j * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![(*a, out)]
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let mut out = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; m * k];
                gemm_acc(&mut ga, g, bv.data(), m, n, k, false, true);
                out.push((*a, ga));
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; k * n];
                gemm_acc(&mut gb, av.data(), g, k, m, n, true, false);
                out.push((*b, gb));
            }
            out
        }
        Op::Bmm { a, b, transpose_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (batches, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = node.value.shape()[2];
            let (need_a, need_b) = (nodes[*a].requires_grad, nodes[*b].requires_grad);
            let mut ga = vec![0.0; if need_a { av.len() } else { 0 }];
            let mut gb = vec![0.0; if need_b { bv.len() } else { 0 }];
            for batch in 0..batches {
                let gs = &g[batch * m * n..(batch + 1) * m * n];
                let a_s = &av.data()[batch * m * k..(batch + 1) * m * k];
                let b_s = &bv.data()[batch * k * n..(batch + 1) * k * n];
                if need_a {
                    let ga_s = &mut ga[batch * m * k..(batch + 1) * m * k];
                    // y = a·bᵀ with b stored [n×k] when transposed
                    gemm_acc(ga_s, gs, b_s, m, n, k, false, !*transpose_b);
                }
                if need_b {
                    let gb_s = &mut gb[batch * k * n..(batch + 1) * k * n];
                    if *transpose_b {
                        gemm_acc(gb_s, gs, a_s, n, m, k, true, false);
                    } else {
                        gemm_acc(gb_s, a_s, gs, k, m, n, true, false);
                    }
                }
            }
            let mut out = Vec::with_capacity(2);
            if need_a {
                out.push((*a, ga));
            }
            if need_b {
                out.push((*b, gb));
            }
            out
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = g[j * r + i];
                }
            }
            vec![(*a, out)]
        }
        Op::Softmax(a, axis) => {
            let (outer, k, inner) = axis_split(node.value.shape(), *axis);
            let mut out = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * k * inner + j * inner + i;
                    let dot: f64 = (0..k).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..k {
                        out[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![(*a, out)]
        }
        Op::LogSoftmax(a, axis) => {
            let (outer, k, inner) = axis_split(node.value.shape(), *axis);
            let mut out = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * k * inner + j * inner + i;
                    let total: f64 = (0..k).map(|j| g[at(j)]).sum();
                    for j in 0..k {
                        out[at(j)] = g[at(j)] - y[at(j)].exp() * total;
                    }
                }
            }
            vec![(*a, out)]
        }
        Op::Concat(ids, axis) => {
            let shape = node.value.shape();
            let (outer, extent, inner) = axis_split(shape, *axis);
            let mut offset = 0;
            ids.iter()
                .map(|&id| {
                    let k = val(id).shape()[*axis];
                    let mut out = Vec::with_capacity(val(id).len());
                    for o in 0..outer {
                        let start = o * extent * inner + offset * inner;
                        out.extend_from_slice(&g[start..start + k * inner]);
                    }
                    offset += k;
                    (id, out)
                })
                .collect()
        }
        Op::TileRows(a, n) => {
            let len = val(*a).len();
            let mut out = vec![0.0; len];
            for copy in 0..*n {
                for (o, v) in out.iter_mut().zip(&g[copy * len..(copy + 1) * len]) {
                    *o += v;
                }
            }
            vec![(*a, out)]
        }
        Op::SelectRows(a, rows) => {
            let x = val(*a);
            let c = x.cols();
            let mut out = vec![0.0; x.len()];
            for (r, &src) in rows.iter().enumerate() {
                for j in 0..c {
                    out[src * c + j] += g[r * c + j];
                }
            }
            vec![(*a, out)]
        }
        Op::RowOuter(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (rows, k) = (av.shape()[0], av.shape()[1]);
            let m = bv.shape()[1];
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for r in 0..rows {
                for i in 0..k {
                    for j in 0..m {
                        let gv = g[r * k * m + i * m + j];
                        ga[r * k + i] += gv * bv.data()[r * m + j];
                        gb[r * m + j] += gv * av.data()[r * k + i];
                    }
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::L2NormalizeRows(a) => {
            let x = val(*a);
            let c = x.cols();
            let mut out = vec![0.0; x.len()];
            for (r, row) in x.data().chunks(c).enumerate() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
                let yr = &y[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    out[r * c + j] = (gr[j] - yr[j] * dot) / norm;
                }
            }
            vec![(*a, out)]
        }
        Op::KlDivergence(p, q) => {
            let (pv, qv) = (val(*p).data(), val(*q).data());
            let gp = pv
                .iter()
                .zip(qv)
                .map(|(&pi, &qi)| {
                    let own = if pi > KL_FLOOR { 1.0 } else { 0.0 };
                    g[0] * (pi.max(KL_FLOOR).ln() - qi.max(KL_FLOOR).ln() + own)
                })
                .collect();
            let gq = pv
                .iter()
                .zip(qv)
                .map(|(&pi, &qi)| if qi > KL_FLOOR { -g[0] * pi / qi } else { 0.0 })
                .collect();
            vec![(*p, gp), (*q, gq)]
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let scale = 2.0 * g[0] / av.len() as f64;
            let ga: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
            let gb = ga.iter().map(|v| -v).collect();
            vec![(*a, ga), (*b, gb)]
        }
    }
}
