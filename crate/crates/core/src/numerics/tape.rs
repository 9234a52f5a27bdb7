//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are appended to a [`Tape`] as they execute, so node order is
//! already topological. [`Tape::backward`] walks the nodes once in reverse.
//! Leaves created with [`Tape::constant`] never receive gradients, and
//! neither does anything computed only from constants.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};

use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Scale { a: usize, factor: f64 },
    AddConst { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    ConcatCols { a: usize, b: usize },
    SliceRows { a: usize, start: usize },
    GatherRows { a: usize, rows: Vec<usize> },
    EmbeddingBag { table: usize, bags: Vec<Vec<u32>> },
    Reshape { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    NormalizeRows { a: usize, norms: Vec<f64> },
    RowDot { a: usize, b: usize },
    SoftmaxXent { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    LogisticXent { logits: usize, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Operation recorder for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    flops: Cell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; `None` when the value does not depend
    /// on any parameter leaf.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Tensor::new(&self.shapes[var.id], g.clone()).ok()
    }

    /// Gradient with respect to `var`, zeros when it was never reached.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var).unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }

    /// Number of nodes that had a gradient computed.
    pub fn visited(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn mismatch<T>(op: &'static str, left: &[usize], right: &[usize]) -> Result<T> {
    Err(Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    })
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating-point multiply/add operations performed by forward ops so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    fn count(&self, n: usize) {
        self.flops.set(self.flops.get() + n as u64);
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        value.ensure_finite(op_name)?;
        let requires_grad = inputs.iter().any(|&i| self.needs(i));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return mismatch("backward", nodes[loss.id].value.shape(), &[]);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if needs(*a) {
                let da = matmul_bt_raw(g, val(*b).data(), m, n, k);
                accumulate(&mut grads[*a], m * k, |buf| add_into(buf, &da));
            }
            if needs(*b) {
                let db = matmul_at_raw(val(*a).data(), g, m, k, n);
                accumulate(&mut grads[*b], k * n, |buf| add_into(buf, &db));
            }
        }
        Op::Transpose { a } => {
            let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
            let da = transpose_raw(g, n, m);
            accumulate(&mut grads[*a], m * n, |buf| add_into(buf, &da));
        }
        Op::Add { a, b } => {
            for &i in [a, b] {
                if needs(i) {
                    accumulate(&mut grads[i], g.len(), |buf| add_into(buf, g));
                }
            }
        }
        Op::Sub { a, b } => {
            if needs(*a) {
                accumulate(&mut grads[*a], g.len(), |buf| add_into(buf, g));
            }
            if needs(*b) {
                accumulate(&mut grads[*b], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
        }
        Op::Mul { a, b } => {
            if needs(*a) {
                let other = val(*b).data();
                accumulate(&mut grads[*a], g.len(), |buf| {
                    for ((x, gy), o) in buf.iter_mut().zip(g).zip(other) {
                        *x += gy * o;
                    }
                });
            }
            if needs(*b) {
                let other = val(*a).data();
                accumulate(&mut grads[*b], g.len(), |buf| {
                    for ((x, gy), o) in buf.iter_mut().zip(g).zip(other) {
                        *x += gy * o;
                    }
                });
            }
        }
        Op::AddRow { a, row } => {
            if needs(*a) {
                accumulate(&mut grads[*a], g.len(), |buf| add_into(buf, g));
            }
            if needs(*row) {
                let n = val(*row).len();
                accumulate(&mut grads[*row], n, |buf| {
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                });
            }
        }
        Op::Scale { a, factor } => {
            accumulate(&mut grads[*a], g.len(), |buf| {
                buf.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y)
            });
        }
        Op::AddConst { a } | Op::Reshape { a } => {
            accumulate(&mut grads[*a], g.len(), |buf| add_into(buf, g));
        }
        Op::Tanh { a } => {
            let y = node.value.data();
            accumulate(&mut grads[*a], g.len(), |buf| {
                for ((x, gy), yy) in buf.iter_mut().zip(g).zip(y) {
                    *x += gy * (1.0 - yy * yy);
                }
            });
        }
        Op::Relu { a } => {
            let input = val(*a).data();
            accumulate(&mut grads[*a], g.len(), |buf| {
                for ((x, gy), xin) in buf.iter_mut().zip(g).zip(input) {
                    if *xin > 0.0 {
                        *x += gy;
                    }
                }
            });
        }
        Op::Sum { a } => {
            let n = val(*a).len();
            accumulate(&mut grads[*a], n, |buf| buf.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::Mean { a } => {
            let n = val(*a).len();
            let share = g[0] / n as f64;
            accumulate(&mut grads[*a], n, |buf| buf.iter_mut().for_each(|x| *x += share));
        }
        Op::ConcatCols { a, b } => {
            let (m, p) = (val(*a).shape()[0], val(*a).shape()[1]);
            let q = val(*b).shape()[1];
            if needs(*a) {
                accumulate(&mut grads[*a], m * p, |buf| {
                    for r in 0..m {
                        add_into(&mut buf[r * p..(r + 1) * p], &g[r * (p + q)..r * (p + q) + p]);
                    }
                });
            }
            if needs(*b) {
                accumulate(&mut grads[*b], m * q, |buf| {
                    for r in 0..m {
                        add_into(
                            &mut buf[r * q..(r + 1) * q],
                            &g[r * (p + q) + p..(r + 1) * (p + q)],
                        );
                    }
                });
            }
        }
        Op::SliceRows { a, start } => {
            let src = val(*a);
            let cols = src.len() / src.shape()[0].max(1);
            accumulate(&mut grads[*a], src.len(), |buf| {
                add_into(&mut buf[start * cols..start * cols + g.len()], g);
            });
        }
        Op::GatherRows { a, rows } => {
            let src = val(*a);
            let cols = src.shape()[1];
            accumulate(&mut grads[*a], src.len(), |buf| {
                for (r, &src_row) in rows.iter().enumerate() {
                    add_into(
                        &mut buf[src_row * cols..(src_row + 1) * cols],
                        &g[r * cols..(r + 1) * cols],
                    );
                }
            });
        }
        Op::EmbeddingBag { table, bags } => {
            let t = val(*table);
            let h = t.shape()[1];
            accumulate(&mut grads[*table], t.len(), |buf| {
                for (r, bag) in bags.iter().enumerate() {
                    let w = 1.0 / bag.len() as f64;
                    let grow = &g[r * h..(r + 1) * h];
                    for &tok in bag {
                        let dst = &mut buf[tok as usize * h..(tok as usize + 1) * h];
                        dst.iter_mut().zip(grow).for_each(|(x, y)| *x += w * y);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let h = val(*gain).len();
            let gv = val(*gain).data();
            if needs(*gain) {
                accumulate(&mut grads[*gain], h, |buf| {
                    for (grow, xrow) in g.chunks(h).zip(xhat.chunks(h)) {
                        for j in 0..h {
                            buf[j] += grow[j] * xrow[j];
                        }
                    }
                });
            }
            if needs(*bias) {
                accumulate(&mut grads[*bias], h, |buf| {
                    for grow in g.chunks(h) {
                        add_into(buf, grow);
                    }
                });
            }
            if needs(*x) {
                let len = g.len();
                accumulate(&mut grads[*x], len, |buf| {
                    let nf = h as f64;
                    for (r, (grow, xrow)) in g.chunks(h).zip(xhat.chunks(h)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..h {
                            let d = grow[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xrow[j];
                        }
                        let dst = &mut buf[r * h..(r + 1) * h];
                        for j in 0..h {
                            let d = grow[j] * gv[j];
                            dst[j] += inv_std[r] / nf * (nf * d - sum_d - xrow[j] * sum_dx);
                        }
                    }
                });
            }
        }
        Op::NormalizeRows { a, norms } => {
            let d = node.value.shape()[1];
            let y = node.value.data();
            accumulate(&mut grads[*a], g.len(), |buf| {
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        buf[r * d + j] += (gr[j] - yr[j] * dot) / norm;
                    }
                }
            });
        }
        Op::RowDot { a, b } => {
            let d = val(*a).shape()[1];
            for (target, other) in [(*a, *b), (*b, *a)] {
                if needs(target) {
                    let o = val(other).data();
                    accumulate(&mut grads[target], o.len(), |buf| {
                        for (r, gr) in g.iter().enumerate() {
                            for j in 0..d {
                                buf[r * d + j] += gr * o[r * d + j];
                            }
                        }
                    });
                }
            }
        }
        Op::SoftmaxXent {
            logits,
            labels,
            probs,
        } => {
            let n = labels.len();
            let c = probs.len() / n;
            let share = g[0] / n as f64;
            accumulate(&mut grads[*logits], probs.len(), |buf| {
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        buf[r * c + j] += share * (probs[r * c + j] - onehot);
                    }
                }
            });
        }
        Op::LogisticXent { logits, targets } => {
            let z = val(*logits).data();
            let share = g[0] / targets.len() as f64;
            accumulate(&mut grads[*logits], z.len(), |buf| {
                for ((x, zi), yi) in buf.iter_mut().zip(z).zip(targets) {
                    *x += share * (sigmoid(*zi) - yi);
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = libm::exp(s - max);
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(core::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return mismatch("matmul", a.shape(), b.shape());
        }
        self.tape.count(m * k * n);
        let out = Tensor::new(&[m, n], matmul_raw(a.data(), b.data(), m, k, n))?;
        self.tape.push("matmul", out, Op::MatMul { a: self.id, b: other.id }, &[self.id, other.id])
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        self.tape.push("transpose", out, Op::Transpose { a: self.id }, &[self.id])
    }

    fn zip_with(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return mismatch(name, a.shape(), b.shape());
        }
        self.tape.count(a.len());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(a.shape(), data)?;
        self.tape.push(name, out, op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub { a: self.id, b: other.id })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul { a: self.id, b: other.id })
    }

    /// Broadcast-add a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row);
        let (a, r) = (self.value(), row.value());
        let (_, n) = a.dims2("add_row")?;
        if r.len() != n {
            return mismatch("add_row", a.shape(), r.shape());
        }
        self.tape.count(a.len());
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(n) {
            add_into(chunk, r.data());
        }
        let out = Tensor::new(a.shape(), data)?;
        self.tape.push("add_row", out, Op::AddRow { a: self.id, row: row.id }, &[self.id, row.id])
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let out = self.value().map(|x| x * factor);
        self.tape.count(out.len());
        self.tape.push("scale", out, Op::Scale { a: self.id, factor }, &[self.id])
    }

    pub fn add_const(self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|x| x + c);
        self.tape.count(out.len());
        self.tape.push("add_const", out, Op::AddConst { a: self.id }, &[self.id])
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let out = self.value().map(libm::tanh);
        self.tape.count(out.len());
        self.tape.push("tanh", out, Op::Tanh { a: self.id }, &[self.id])
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let out = self.value().map(|x| x.max(0.0));
        self.tape.count(out.len());
        self.tape.push("relu", out, Op::Relu { a: self.id }, &[self.id])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let v = self.value();
        self.tape.count(v.len());
        let out = Tensor::scalar(v.data().iter().sum());
        self.tape.push("sum", out, Op::Sum { a: self.id }, &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.is_empty() {
            return mismatch("mean", v.shape(), &[1]);
        }
        self.tape.count(v.len());
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.tape.push("mean", out, Op::Mean { a: self.id }, &[self.id])
    }

    /// Sum of squared elements.
    pub fn sum_squares(self) -> Result<Var<'t>> {
        self.mul(self)?.sum()
    }

    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, p) = a.dims2("concat_cols")?;
        let (m2, q) = b.dims2("concat_cols")?;
        if m != m2 {
            return mismatch("concat_cols", a.shape(), b.shape());
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        let out = Tensor::new(&[m, p + q], data)?;
        self.tape.push("concat_cols", out, Op::ConcatCols { a: self.id, b: other.id }, &[self.id, other.id])
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.dims2("slice_rows")?;
        if start + len > m {
            return mismatch("slice_rows", a.shape(), &[start + len, n]);
        }
        let out = Tensor::new(&[len, n], a.data()[start * n..(start + len) * n].to_vec())?;
        self.tape.push("slice_rows", out, Op::SliceRows { a: self.id, start }, &[self.id])
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::UnknownId { kind: "row", id: r });
            }
            data.extend_from_slice(a.row(r));
        }
        let out = Tensor::new(&[rows.len(), n], data)?;
        self.tape.push("gather_rows", out, Op::GatherRows { a: self.id, rows: rows.to_vec() }, &[self.id])
    }

    /// Mean of looked-up table rows for each bag of token ids.
    pub fn embedding_bag(self, bags: &[Vec<u32>]) -> Result<Var<'t>> {
        let table = self.value();
        let (vocab, h) = table.dims2("embedding_bag")?;
        let mut data = vec![0.0; bags.len() * h];
        for (r, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::TooFewExamples { needed: 1, got: 0 });
            }
            let w = 1.0 / bag.len() as f64;
            let dst = &mut data[r * h..(r + 1) * h];
            for &tok in bag {
                if tok as usize >= vocab {
                    return Err(Error::UnknownId { kind: "token", id: tok as usize });
                }
                dst.iter_mut().zip(table.row(tok as usize)).for_each(|(x, y)| *x += w * y);
            }
            self.tape.count(bag.len() * h);
        }
        let out = Tensor::new(&[bags.len(), h], data)?;
        self.tape.push("embedding_bag", out, Op::EmbeddingBag { table: self.id, bags: bags.to_vec() }, &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        self.tape.push("reshape", out, Op::Reshape { a: self.id }, &[self.id])
    }

    /// Row-wise layer normalization with elementwise gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let (m, h) = x.dims2("layer_norm")?;
        if g.len() != h || b.len() != h {
            return mismatch("layer_norm", x.shape(), g.shape());
        }
        let mut xhat = vec![0.0; m * h];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * h];
        for r in 0..m {
            let row = x.row(r);
            let mu = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / h as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[r] = inv;
            for j in 0..h {
                let xh = (row[j] - mu) * inv;
                xhat[r * h + j] = xh;
                out[r * h + j] = g.data()[j] * xh + b.data()[j];
            }
        }
        self.tape.count(5 * m * h);
        let out = Tensor::new(&[m, h], out)?;
        self.tape.push(
            "layer_norm",
            out,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, inv_std },
            &[self.id, gain.id, bias.id],
        )
    }

    /// Scales every row to unit L2 norm; zero rows are an error.
    pub fn normalize_rows(self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.dims2("normalize_rows")?;
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = a.row(r);
            let norm = libm::sqrt(row.iter().map(|x| x * x).sum());
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm { op: "normalize_rows" });
            }
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        self.tape.count(3 * m * n);
        let out = Tensor::new(&[m, n], data)?;
        self.tape.push("normalize_rows", out, Op::NormalizeRows { a: self.id, norms }, &[self.id])
    }

    /// Dot product of matching rows: `[m×d], [m×d] -> [m]`.
    pub fn row_dot(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() || a.rank() != 2 {
            return mismatch("row_dot", a.shape(), b.shape());
        }
        let (m, _) = a.dims2("row_dot")?;
        let data = (0..m)
            .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        self.tape.count(a.len());
        self.tape.push("row_dot", Tensor::vector(data), Op::RowDot { a: self.id, b: other.id }, &[self.id, other.id])
    }

    /// Mean negative log-softmax probability of each row's label.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let logits = self.value();
        let (n, c) = logits.dims2("softmax_cross_entropy")?;
        if labels.len() != n || n == 0 {
            return mismatch("softmax_cross_entropy", logits.shape(), &[labels.len()]);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let probs = softmax_rows(logits.data(), c);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|x| libm::exp(x - max)).sum::<f64>());
            total += lse - row[label];
        }
        self.tape.count(4 * n * c);
        let out = Tensor::scalar(total / n as f64);
        self.tape.push(
            "softmax_cross_entropy",
            out,
            Op::SoftmaxXent { logits: self.id, labels: labels.to_vec(), probs },
            &[self.id],
        )
    }

    /// Mean binary cross-entropy of a length-`n` logit vector against 0/1 targets.
    pub fn logistic_cross_entropy(self, targets: &[bool]) -> Result<Var<'t>> {
        let z = self.value();
        if z.len() != targets.len() || z.is_empty() {
            return mismatch("logistic_cross_entropy", z.shape(), &[targets.len()]);
        }
        let targets: Vec<f64> = targets.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let total: f64 = z
            .data()
            .iter()
            .zip(&targets)
            .map(|(zi, yi)| zi.max(0.0) - yi * zi + libm::log1p(libm::exp(-libm::fabs(*zi))))
            .sum();
        self.tape.count(4 * z.len());
        let out = Tensor::scalar(total / z.len() as f64);
        self.tape.push("logistic_cross_entropy", out, Op::LogisticXent { logits: self.id, targets }, &[self.id])
    }
}
