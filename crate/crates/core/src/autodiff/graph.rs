use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::{check_finite, order_free_sum, view_of, Tensor};
use super::{AdError, Result};

/// A recorded primitive application. Input fields are node ids.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Pow(usize, f64),
    /// Reduce a broadcast operand back to this node's shape.
    SumTo(usize),
    /// Expand the input to this node's shape.
    BroadcastTo(usize),
    Mean(usize),
    L2Norm(usize),
    Softmax(usize),
    CrossEntropy(usize, Rc<[usize]>),
    Mse(usize, usize),
    Concat(Vec<usize>, usize),
    Reshape(usize),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
}

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Computation record for one logical thread of work.
///
/// Nodes are appended in evaluation order, so the record is always
/// topologically sorted. Backward passes append their own nodes, which is
/// what makes gradients differentiable.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf, true)
    }

    /// A leaf that never requires a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub(crate) fn push(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn op(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    pub(crate) fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    fn emit(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, name: &'static str) -> Result<Var<'_>> {
        check_finite(name, &data)?;
        let requires = inputs(&op).iter().any(|&i| self.requires(i));
        Ok(self.push(Rc::new(Tensor::from_parts(shape, data)), op, requires))
    }
}

pub(crate) fn inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Mse(a, b) => {
            vec![*a, *b]
        }
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Pow(a, _)
        | Op::SumTo(a)
        | Op::BroadcastTo(a)
        | Op::Mean(a)
        | Op::L2Norm(a)
        | Op::Softmax(a)
        | Op::CrossEntropy(a, _)
        | Op::Reshape(a) => vec![*a],
        Op::Slice { src, .. } => vec![*src],
        Op::Concat(parts, _) => parts.clone(),
    }
}

/// Output shape of broadcasting `a` against `b` (rank ≤ 2, numpy-style on
/// the (rows, cols) view).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (ra, ca) = view_of(a);
    let (rb, cb) = view_of(b);
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    let mismatch = || AdError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    let r = dim(ra, rb).ok_or_else(mismatch)?;
    let c = dim(ca, cb).ok_or_else(mismatch)?;
    if (r, c) == (ra, ca) && a.len() >= b.len() {
        Ok(a.to_vec())
    } else if (r, c) == (rb, cb) {
        Ok(b.to_vec())
    } else {
        Ok(vec![r, c])
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.shape() == b.shape() {
        return a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    let (r, c) = view_of(out_shape);
    let (ra, ca) = a.view();
    let (rb, cb) = b.view();
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ra == 1 { 0 } else { i * ca };
        let ib = if rb == 1 { 0 } else { i * cb };
        for j in 0..c {
            let x = ad[ia + if ca == 1 { 0 } else { j }];
            let y = bd[ib + if cb == 1 { 0 } else { j }];
            out.push(f(x, y));
        }
    }
    out
}

pub(crate) fn matmul_kernel(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<(usize, usize, Vec<f64>)> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(AdError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ar, ac) = a.view();
    let (br, bc) = b.view();
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(AdError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let rhs: std::borrow::Cow<'_, [f64]> = if tb {
        std::borrow::Cow::Owned(transpose(b.data(), br, bc))
    } else {
        std::borrow::Cow::Borrowed(b.data())
    };
    if ta {
        // aᵀb with a long shared dimension: stream a and b once, keeping the
        // small output resident. Each entry still accumulates over p in order.
        let ad = a.data();
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let b = &rhs[p * n..(p + 1) * n];
            for (i, &x) in ad[p * m..(p + 1) * m].iter().enumerate() {
                for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                    *o += x * y;
                }
            }
        }
        return Ok((m, n, out));
    }
    let lhs = a.data();
    let mut out = vec![0.0; m * n];
    // Four rows of rhs per pass; the additions stay in left-to-right order,
    // so the result matches a plain triple loop bit for bit.
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a = &lhs[i * k..(i + 1) * k];
        let mut p = 0;
        while p + 4 <= k {
            let (x0, x1, x2, x3) = (a[p], a[p + 1], a[p + 2], a[p + 3]);
            let b0 = &rhs[p * n..(p + 1) * n];
            let b1 = &rhs[(p + 1) * n..(p + 2) * n];
            let b2 = &rhs[(p + 2) * n..(p + 3) * n];
            let b3 = &rhs[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                row[j] = row[j] + x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
            }
            p += 4;
        }
        for p in p..k {
            let x = a[p];
            let b = &rhs[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(b) {
                *o += x * y;
            }
        }
    }
    Ok((m, n, out))
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn softmax_rows(x: &Tensor) -> Vec<f64> {
    let (r, c) = x.view();
    let mut out = Vec::with_capacity(r * c);
    let mut scratch = Vec::with_capacity(c);
    for row in x.data().chunks(c.max(1)).take(r) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        scratch.clear();
        scratch.extend(row.iter().map(|v| (v - max).exp()));
        let exps = scratch.clone();
        let total = order_free_sum(&mut scratch);
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value().data().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    fn same_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(AdError::Invalid("operands belong to different graphs".into()))
        }
    }

    fn binary(self, other: Var<'g>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let data = zip_broadcast(&a, &b, &shape, f);
        self.graph.emit(op, shape, data, name)
    }

    fn unary(self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'g>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        self.graph.emit(op, a.shape().to_vec(), data, name)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |x, y| x / y)
    }

    /// Multiply by a constant.
    pub fn scale(self, factor: f64) -> Result<Var<'g>> {
        self.unary("scale", Op::Scale(self.id, factor), |x| x * factor)
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    /// `self · other` for rank-2 operands.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(self, other: Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (m, n, data) = matmul_kernel(&self.value(), &other.value(), ta, tb)?;
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            ta,
            tb,
        };
        self.graph.emit(op, vec![m, n], data, "matmul")
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary("relu", Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        self.unary("tanh", Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Result<Var<'g>> {
        self.unary("log", Op::Log(self.id), f64::ln)
    }

    pub fn powf(self, exponent: f64) -> Result<Var<'g>> {
        self.unary("pow", Op::Pow(self.id, exponent), |x| x.powf(exponent))
    }

    /// Sum of all elements (scalar).
    pub fn sum(self) -> Result<Var<'g>> {
        self.sum_to(&[])
    }

    /// Sum over rows, keeping a (rows, 1) column.
    pub fn sum_rows(self) -> Result<Var<'g>> {
        let (r, _) = self.value().view();
        self.sum_to(&[r, 1])
    }

    /// Reduce by summation to `shape`, the inverse of broadcasting.
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(self);
        }
        let (r, c) = a.view();
        let (tr, tc) = view_of(shape);
        if (tr != 1 && tr != r) || (tc != 1 && tc != c) {
            return Err(AdError::ShapeMismatch {
                op: "sum_to",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let mut out = vec![0.0; tr * tc];
        for i in 0..r {
            for j in 0..c {
                let ti = if tr == 1 { 0 } else { i };
                let tj = if tc == 1 { 0 } else { j };
                out[ti * tc + tj] += a.data()[i * c + j];
            }
        }
        self.graph.emit(Op::SumTo(self.id), shape.to_vec(), out, "sum")
    }

    /// Expand to `shape` under the broadcasting rules of the binary ops.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(self);
        }
        let (ra, ca) = a.view();
        let (r, c) = view_of(shape);
        if (ra != 1 && ra != r) || (ca != 1 && ca != c) {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_to",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let si = if ra == 1 { 0 } else { i };
                let sj = if ca == 1 { 0 } else { j };
                out.push(a.data()[si * ca + sj]);
            }
        }
        self.graph
            .emit(Op::BroadcastTo(self.id), shape.to_vec(), out, "broadcast")
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let a = self.value();
        if a.is_empty() {
            return Err(AdError::Invalid("mean of an empty tensor".into()));
        }
        let m = a.data().iter().sum::<f64>() / a.len() as f64;
        self.graph.emit(Op::Mean(self.id), Vec::new(), vec![m], "mean")
    }

    /// Euclidean norm of all elements (scalar).
    pub fn l2_norm(self) -> Result<Var<'g>> {
        let a = self.value();
        let n = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.graph.emit(Op::L2Norm(self.id), Vec::new(), vec![n], "l2_norm")
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Var<'g>> {
        let a = self.value();
        let data = softmax_rows(&a);
        self.graph
            .emit(Op::Softmax(self.id), a.shape().to_vec(), data, "softmax")
    }

    /// Mean softmax cross-entropy of `self` (rows × classes logits) against
    /// integer class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let (r, c) = a.view();
        if a.shape().len() != 2 || labels.len() != r || r == 0 {
            return Err(AdError::ShapeMismatch {
                op: "cross_entropy",
                lhs: a.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(AdError::Invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut total = 0.0;
        let mut scratch = Vec::with_capacity(c);
        for (row, &label) in a.data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            scratch.clear();
            scratch.extend(row.iter().map(|v| (v - max).exp()));
            let lse = max + order_free_sum(&mut scratch).ln();
            total += lse - row[label];
        }
        let op = Op::CrossEntropy(self.id, labels.into());
        self.graph.emit(op, Vec::new(), vec![total / r as f64], "cross_entropy")
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(self, target: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&target)?;
        let (a, b) = (self.value(), target.value());
        if a.shape() != b.shape() || a.is_empty() {
            return Err(AdError::ShapeMismatch {
                op: "mse",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let op = Op::Mse(self.id, target.id);
        self.graph.emit(op, Vec::new(), vec![s / a.len() as f64], "mse")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.len() || shape.len() > 2 {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        if a.shape() == shape {
            return Ok(self);
        }
        self.graph
            .emit(Op::Reshape(self.id), shape.to_vec(), a.data().to_vec(), "reshape")
    }

    /// Elements `start..end` along `axis` (axis 0 of a vector is its only axis).
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g>> {
        let a = self.value();
        let shape = a.shape();
        let bad = || AdError::Invalid(format!("slice {start}..{end} on axis {axis} of {shape:?}"));
        if start > end {
            return Err(bad());
        }
        let (shape_out, data) = match (shape.len(), axis) {
            (1, 0) => {
                if end > shape[0] {
                    return Err(bad());
                }
                (vec![end - start], a.data()[start..end].to_vec())
            }
            (2, 0) => {
                if end > shape[0] {
                    return Err(bad());
                }
                let c = shape[1];
                (vec![end - start, c], a.data()[start * c..end * c].to_vec())
            }
            (2, 1) => {
                if end > shape[1] {
                    return Err(bad());
                }
                let (r, c) = (shape[0], shape[1]);
                let w = end - start;
                let mut out = Vec::with_capacity(r * w);
                for i in 0..r {
                    out.extend_from_slice(&a.data()[i * c + start..i * c + end]);
                }
                (vec![r, w], out)
            }
            _ => return Err(bad()),
        };
        let op = Op::Slice {
            src: self.id,
            axis,
            start,
        };
        self.graph.emit(op, shape_out, data, "slice")
    }

    /// Value-identical leaf that blocks gradient flow.
    pub fn detach(self) -> Var<'g> {
        self.graph.push(self.value(), Op::Leaf, false)
    }
}

/// Join tensors along `axis`. Vectors concatenate along axis 0; matrices
/// along rows (0) or columns (1).
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| AdError::Invalid("concat of zero tensors".into()))?;
    for p in parts {
        first.same_graph(p)?;
    }
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let mismatch = |t: &Tensor| AdError::ShapeMismatch {
        op: "concat",
        lhs: values[0].shape().to_vec(),
        rhs: t.shape().to_vec(),
    };
    let rank = values[0].shape().len();
    let (shape, data) = match (rank, axis) {
        (1, 0) => {
            let mut data = Vec::new();
            for v in &values {
                if v.shape().len() != 1 {
                    return Err(mismatch(v));
                }
                data.extend_from_slice(v.data());
            }
            (vec![data.len()], data)
        }
        (2, 0) => {
            let c = values[0].shape()[1];
            let mut data = Vec::new();
            let mut rows = 0;
            for v in &values {
                if v.shape().len() != 2 || v.shape()[1] != c {
                    return Err(mismatch(v));
                }
                rows += v.shape()[0];
                data.extend_from_slice(v.data());
            }
            (vec![rows, c], data)
        }
        (2, 1) => {
            let r = values[0].shape()[0];
            let mut cols = 0;
            for v in &values {
                if v.shape().len() != 2 || v.shape()[0] != r {
                    return Err(mismatch(v));
                }
                cols += v.shape()[1];
            }
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for v in &values {
                    let c = v.shape()[1];
                    data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
                }
            }
            (vec![r, cols], data)
        }
        _ => {
            return Err(AdError::Invalid(format!(
                "concat along axis {axis} of rank-{rank} tensors"
            )))
        }
    };
    let op = Op::Concat(parts.iter().map(|p| p.id).collect(), axis);
    first.graph.emit(op, shape, data, "concat")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
