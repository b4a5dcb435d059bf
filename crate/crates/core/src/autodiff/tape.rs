use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{axis_blocks, Tensor};
use crate::error::{arg_err, dim_err, FvnError, Result};

/// Index of a recorded node on a [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul { m: usize, k: usize, n: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Stack,
    Sigmoid,
    Tanh,
    Softmax { axis: usize },
    Log,
    Sum,
    Mean,
    RowSelect(usize),
    StraightThrough,
    CrossEntropy { target: usize, probs: Vec<f64> },
    BceWithLogits { targets: Vec<f64> },
}

struct Input {
    node: Option<NodeId>,
    value: Rc<Tensor>,
}

struct Node {
    op: Op,
    inputs: Vec<Input>,
    output: Rc<Tensor>,
}

/// Define-by-run record of primitive applications.
///
/// Nodes are appended in evaluation order, so every input of a node sits at a
/// lower index and a single reverse sweep visits each node once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    freeze: RefCell<Freeze>,
}

/// Values captured at the operands of `stop_gradient` and
/// `straight_through`, in call order.
///
/// Replaying them turns the estimator into an ordinary smooth function of
/// the inputs: every detached value is pinned to its recorded base value,
/// and every straight-through output becomes `e0 + (z - z0)`. Its true
/// derivative at the base point equals what [`Tape::backward`] reports,
/// which makes it a black-box oracle for finite differences.
#[derive(Default)]
enum Freeze {
    #[default]
    Off,
    Record(Vec<Tensor>),
    Replay(Vec<Tensor>, usize),
}

/// A tensor value, optionally attached to a node on a tape.
///
/// Values without a node are constants: they never receive gradient.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    value: Rc<Tensor>,
    node: Option<NodeId>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("node", &self.node).field("value", &self.value).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    entries: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.node.and_then(|id| self.by_node(id))
    }

    pub fn by_node(&self, id: NodeId) -> Option<&Tensor> {
        self.entries.get(id).and_then(|e| e.as_ref())
    }

    /// Gradient of `var`, or zeros shaped like it when nothing flowed back.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records detached and straight-through operands.
    pub fn recording() -> Self {
        Tape { freeze: RefCell::new(Freeze::Record(Vec::new())), ..Self::default() }
    }

    /// A tape that substitutes values captured by a recording tape.
    pub fn replaying(frozen: Vec<Tensor>) -> Self {
        Tape { freeze: RefCell::new(Freeze::Replay(frozen, 0)), ..Self::default() }
    }

    /// Values captured so far by a recording tape.
    pub fn frozen_values(&self) -> Vec<Tensor> {
        match &*self.freeze.borrow() {
            Freeze::Record(v) | Freeze::Replay(v, _) => v.clone(),
            Freeze::Off => Vec::new(),
        }
    }

    /// Record `value` or take the next replayed one.
    fn freeze_point(&self, value: &Tensor) -> Result<Option<Tensor>> {
        match &mut *self.freeze.borrow_mut() {
            Freeze::Off => Ok(None),
            Freeze::Record(v) => {
                v.push(value.clone());
                Ok(None)
            }
            Freeze::Replay(v, pos) => {
                let Some(t) = v.get(*pos) else {
                    return Err(FvnError::State("replay ran past the recorded values".into()));
                };
                if t.shape() != value.shape() {
                    return dim_err("replay", format!("{:?} recorded, {:?} now", t.shape(), value.shape()));
                }
                *pos += 1;
                Ok(Some(t.clone()))
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that accumulates gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let value = Rc::new(value);
        let id = self.push(Op::Leaf, Vec::new(), value.clone());
        Var { tape: self, value, node: Some(id) }
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var { tape: self, value: Rc::new(value), node: None }
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, op: Op, inputs: Vec<Input>, output: Rc<Tensor>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs, output });
        nodes.len() - 1
    }

    fn record(&self, op: Op, inputs: &[&Var<'_>], output: Tensor) -> Var<'_> {
        let output = Rc::new(output);
        let node = if inputs.iter().any(|v| v.node.is_some()) {
            let ins = inputs
                .iter()
                .map(|v| Input { node: v.node, value: v.value.clone() })
                .collect();
            Some(self.push(op, ins, output.clone()))
        } else {
            None
        };
        Var { tape: self, value: output, node }
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return arg_err(format!("backward needs a scalar loss, got shape {:?}", loss.shape()));
        }
        let Some(root) = loss.node else {
            return arg_err("loss is not recorded on the tape");
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes[id], &g, &mut grads);
            grads[id] = Some(g);
        }
        let entries = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.map(|data| Tensor::new(n.output.shape().to_vec(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { entries })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], input: &Input) -> Option<&'a mut Vec<f64>> {
    let id = input.node?;
    let len = input.value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let ins = &node.inputs;
    let y = node.output.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add => {
            for input in ins {
                if let Some(d) = slot(grads, input) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Sub => {
            if let Some(d) = slot(grads, &ins[0]) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = slot(grads, &ins[1]) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul => {
            let a = ins[0].value.data();
            let b = ins[1].value.data();
            if let Some(d) = slot(grads, &ins[0]) {
                for i in 0..d.len() {
                    d[i] += g[i] * b[i];
                }
            }
            if let Some(d) = slot(grads, &ins[1]) {
                for i in 0..d.len() {
                    d[i] += g[i] * a[i];
                }
            }
        }
        Op::Scale(c) => {
            if let Some(d) = slot(grads, &ins[0]) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
            }
        }
        &Op::MatMul { m, k, n } => {
            let a = ins[0].value.data();
            let b = ins[1].value.data();
            if let Some(da) = slot(grads, &ins[0]) {
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let bp = &b[p * n..(p + 1) * n];
                        da[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(db) = slot(grads, &ins[1]) {
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = a[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let row = &mut db[p * n..(p + 1) * n];
                        row.iter_mut().zip(gi).for_each(|(d, g)| *d += aip * g);
                    }
                }
            }
        }
        &Op::Concat { axis } => {
            let (outer, _, inner) = axis_blocks(node.output.shape(), axis);
            let total = node.output.shape()[axis] * inner;
            let mut offset = 0;
            for input in ins {
                let width = input.value.shape()[axis] * inner;
                if let Some(d) = slot(grads, input) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        let dst = &mut d[o * width..(o + 1) * width];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += width;
            }
        }
        &Op::Slice { axis, start } => {
            if let Some(d) = slot(grads, &ins[0]) {
                let (outer, full, inner) = axis_blocks(ins[0].value.shape(), axis);
                let len = node.output.shape()[axis];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = o * full * inner + start * inner;
                    let dst = &mut d[base..base + len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Stack => {
            let width = node.output.shape()[1];
            for (r, input) in ins.iter().enumerate() {
                if let Some(d) = slot(grads, input) {
                    let src = &g[r * width..(r + 1) * width];
                    d.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Sigmoid => {
            if let Some(d) = slot(grads, &ins[0]) {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Tanh => {
            if let Some(d) = slot(grads, &ins[0]) {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        &Op::Softmax { axis } => {
            if let Some(d) = slot(grads, &ins[0]) {
                let (outer, len, inner) = axis_blocks(node.output.shape(), axis);
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |t: usize| o * len * inner + t * inner + j;
                        let dot: f64 = (0..len).map(|t| y[idx(t)] * g[idx(t)]).sum();
                        for t in 0..len {
                            d[idx(t)] += y[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
            }
        }
        Op::Log => {
            let x = ins[0].value.data();
            if let Some(d) = slot(grads, &ins[0]) {
                for i in 0..d.len() {
                    d[i] += g[i] / x[i];
                }
            }
        }
        Op::Sum => {
            if let Some(d) = slot(grads, &ins[0]) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean => {
            if let Some(d) = slot(grads, &ins[0]) {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s);
            }
        }
        &Op::RowSelect(row) => {
            if let Some(d) = slot(grads, &ins[0]) {
                let w = g.len();
                d[row * w..(row + 1) * w].iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::StraightThrough => {
            if let Some(d) = slot(grads, &ins[0]) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::CrossEntropy { target, probs } => {
            if let Some(d) = slot(grads, &ins[0]) {
                for (i, p) in probs.iter().enumerate() {
                    let onehot = if i == *target { 1.0 } else { 0.0 };
                    d[i] += g[0] * (p - onehot);
                }
            }
        }
        Op::BceWithLogits { targets } => {
            let x = ins[0].value.data();
            if let Some(d) = slot(grads, &ins[0]) {
                for i in 0..d.len() {
                    d[i] += g[0] * (sigmoid(x[i]) - targets[i]);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(op: &'static str, inputs: &[&Var<'_>]) -> Result<()> {
    for (i, v) in inputs.iter().enumerate() {
        if !v.value.is_finite() {
            return Err(FvnError::Numeric {
                op,
                detail: format!("input {i} (shape {:?}) holds a non-finite value", v.shape()),
            });
        }
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    fn binary(&self, other: &Var<'t>, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        same_shape(name, self, other)?;
        check_finite(name, &[self, other])?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| f(*a, *b)).collect();
        let out = Tensor::new(self.shape().to_vec(), data)?;
        Ok(self.tape.record(op, &[self, other], out))
    }

    fn unary(&self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        check_finite(name, &[self])?;
        let data = self.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(self.shape().to_vec(), data)?;
        Ok(self.tape.record(op, &[self], out))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(c), "scale", |v| c * v)
    }

    /// Matrix product. Accepts `[m,k]·[k,n]`, `[m,k]·[k]` and `[k]·[k,n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (m, k, out_rows) = match self.shape() {
            [k] => (1, *k, false),
            [m, k] => (*m, *k, true),
            s => return dim_err("matmul", format!("left operand has shape {s:?}")),
        };
        let (k2, n, out_cols) = match other.shape() {
            [k2] => (*k2, 1, false),
            [k2, n] => (*k2, *n, true),
            s => return dim_err("matmul", format!("right operand has shape {s:?}")),
        };
        if k != k2 || (!out_rows && !out_cols) {
            return dim_err("matmul", format!("{:?} x {:?}", self.shape(), other.shape()));
        }
        check_finite("matmul", &[self, other])?;
        let a = self.data();
        let b = other.data();
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let ci = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let bp = &b[p * n..(p + 1) * n];
                ci.iter_mut().zip(bp).for_each(|(c, b)| *c += aip * b);
            }
        }
        let shape = match (out_rows, out_cols) {
            (true, true) => vec![m, n],
            (true, false) => vec![m],
            _ => vec![n],
        };
        let out = Tensor::new(shape, c)?;
        Ok(self.tape.record(Op::MatMul { m, k, n }, &[self, other], out))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return dim_err("concat", "no inputs");
        };
        let base = first.shape();
        if axis >= base.len() {
            return dim_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s.iter().zip(base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return dim_err("concat", format!("{base:?} vs {s:?} along axis {axis}"));
            }
            axis_total += s[axis];
        }
        let refs: Vec<&Var<'t>> = parts.iter().collect();
        check_finite("concat", &refs)?;
        let mut shape = base.to_vec();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let w = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(first.tape.record(Op::Concat { axis }, &refs, out))
    }

    /// Stack equal-width vectors as the rows of a matrix.
    pub fn stack_rows(rows: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = rows.first() else {
            return dim_err("stack_rows", "no rows");
        };
        let width = match first.shape() {
            [w] => *w,
            s => return dim_err("stack_rows", format!("row shape {s:?} is not a vector")),
        };
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.shape() != [width] {
                return dim_err("stack_rows", format!("row shape {:?}, expected [{width}]", r.shape()));
            }
            data.extend_from_slice(r.data());
        }
        let refs: Vec<&Var<'t>> = rows.iter().collect();
        check_finite("stack_rows", &refs)?;
        let out = Tensor::new(vec![rows.len(), width], data)?;
        Ok(first.tape.record(Op::Stack, &refs, out))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err("slice", format!("{start}..{} on axis {axis} of {shape:?}", start + len));
        }
        check_finite("slice", &[self])?;
        let (outer, full, inner) = axis_blocks(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.tape.record(Op::Slice { axis, start }, &[self], out))
    }

    /// Row `index` of a matrix (embedding lookup).
    pub fn row(&self, index: usize) -> Result<Var<'t>> {
        let [rows, cols] = *self.shape() else {
            return dim_err("row_select", format!("shape {:?} is not a matrix", self.shape()));
        };
        if index >= rows {
            return arg_err(format!("row {index} out of range for {rows} rows"));
        }
        check_finite("row_select", &[self])?;
        let out = Tensor::vector(self.value.row(index).to_vec());
        debug_assert_eq!(out.len(), cols);
        Ok(self.tape.record(Op::RowSelect(index), &[self], out))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid, "sigmoid", sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary(Op::Tanh, "tanh", f64::tanh)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary(Op::Log, "log", f64::ln)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return dim_err("softmax", format!("axis {axis} out of range for {shape:?}"));
        }
        check_finite("softmax", &[self])?;
        let (outer, len, inner) = axis_blocks(shape, axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |t: usize| o * len * inner + t * inner + j;
                let max = (0..len).map(|t| x[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for t in 0..len {
                    let e = (x[idx(t)] - max).exp();
                    y[idx(t)] = e;
                    z += e;
                }
                for t in 0..len {
                    y[idx(t)] /= z;
                }
            }
        }
        let out = Tensor::new(shape.to_vec(), y)?;
        Ok(self.tape.record(Op::Softmax { axis }, &[self], out))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        check_finite("sum", &[self])?;
        let out = Tensor::scalar(self.data().iter().sum());
        Ok(self.tape.record(Op::Sum, &[self], out))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        check_finite("mean", &[self])?;
        let out = Tensor::scalar(self.data().iter().sum::<f64>() / self.value.len() as f64);
        Ok(self.tape.record(Op::Mean, &[self], out))
    }

    /// Sum of squared entries.
    pub fn sum_sq(&self) -> Result<Var<'t>> {
        self.mul(self)?.sum()
    }

    /// Same value, detached: no gradient ever flows through the result.
    pub fn stop_gradient(&self) -> Var<'t> {
        let value = match self.tape.freeze_point(&self.value) {
            Ok(Some(v)) => Rc::new(v),
            _ => self.value.clone(),
        };
        Var { tape: self.tape, value, node: None }
    }

    /// Forward value is `replacement`; the backward pass copies the incoming
    /// gradient onto `self` unchanged.
    pub fn straight_through(&self, replacement: Tensor) -> Result<Var<'t>> {
        if replacement.shape() != self.shape() {
            return dim_err("straight_through", format!("{:?} vs {:?}", self.shape(), replacement.shape()));
        }
        check_finite("straight_through", &[self])?;
        let z0 = self.tape.freeze_point(&self.value)?;
        let e0 = self.tape.freeze_point(&replacement)?;
        let out = match (z0, e0) {
            (Some(z0), Some(e0)) => {
                let data = self.data().iter().zip(z0.data()).zip(e0.data()).map(|((z, z0), e0)| e0 + (z - z0)).collect();
                Tensor::new(self.shape().to_vec(), data)?
            }
            _ => replacement,
        };
        Ok(self.tape.record(Op::StraightThrough, &[self], out))
    }

    /// `-log softmax(self)[target]` for a logit vector, max-shifted.
    pub fn cross_entropy(&self, target: usize) -> Result<Var<'t>> {
        let [v] = *self.shape() else {
            return dim_err("cross_entropy", format!("logits shape {:?} is not a vector", self.shape()));
        };
        if v < 2 {
            return arg_err(format!("cross_entropy needs at least 2 classes, got {v}"));
        }
        if target >= v {
            return arg_err(format!("target index {target} out of range for {v} classes"));
        }
        check_finite("cross_entropy", &[self])?;
        let x = self.data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = x.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        let probs = x.iter().map(|v| (v - lse).exp()).collect();
        let out = Tensor::scalar(lse - x[target]);
        Ok(self.tape.record(Op::CrossEntropy { target, probs }, &[self], out))
    }

    /// Summed binary cross-entropy of per-element sigmoid probabilities
    /// against 0/1 targets.
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Var<'t>> {
        if self.value.len() != targets.len() || self.shape().len() != 1 {
            return dim_err(
                "bce_with_logits",
                format!("logits {:?} vs {} targets", self.shape(), targets.len()),
            );
        }
        check_finite("bce_with_logits", &[self])?;
        let loss = self
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &m)| x.max(0.0) - x * m + (-x.abs()).exp().ln_1p())
            .sum();
        let op = Op::BceWithLogits { targets: targets.to_vec() };
        Ok(self.tape.record(op, &[self], Tensor::scalar(loss)))
    }
}
