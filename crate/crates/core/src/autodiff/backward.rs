use std::collections::HashMap;

use super::graph::{concat, inputs, Graph, Op, Var};
use super::tensor::Tensor;
use super::{AdError, Result};

/// Gradients of one scalar output, keyed by the variable they belong to.
#[derive(Debug)]
pub struct GradientMap<'g> {
    entries: HashMap<usize, Var<'g>>,
}

impl<'g> GradientMap<'g> {
    /// Gradient with respect to `var`, if it was requested.
    pub fn get(&self, var: Var<'g>) -> Option<Var<'g>> {
        self.entries.get(&var.id).copied()
    }

    /// Like [`get`](Self::get) but panics on a variable that was not requested.
    pub fn wrt(&self, var: Var<'g>) -> Var<'g> {
        self.get(var)
            .unwrap_or_else(|| panic!("no gradient recorded for variable {}", var.id))
    }

    pub fn tensor(&self, var: Var<'g>) -> Option<Tensor> {
        self.get(var).map(|v| (*v.value()).clone())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Reverse-mode gradient of the scalar `output` with respect to `wrt`.
///
/// The backward pass is itself recorded into the graph. With
/// `create_graph = true` those nodes stay, so the returned gradients can be
/// differentiated again. Otherwise they are dropped and the gradients come
/// back as constant leaves.
///
/// A variable recorded before `output` that does not influence it gets a
/// zero gradient; a variable from another graph, or recorded after
/// `output`, is an error.
pub fn gradient<'g>(output: Var<'g>, wrt: &[Var<'g>], create_graph: bool) -> Result<GradientMap<'g>> {
    let graph = output.graph;
    let out_value = output.value();
    if out_value.len() != 1 {
        return Err(AdError::NonScalarOutput(out_value.shape().to_vec()));
    }
    for w in wrt {
        if !std::ptr::eq(w.graph, graph) || w.id > output.id {
            return Err(AdError::NotInGraph(w.id));
        }
    }
    let mark = graph.len();
    let Some(lo) = wrt.iter().map(|w| w.id).min() else {
        return Ok(GradientMap {
            entries: HashMap::new(),
        });
    };

    // Which nodes in [lo, output] depend on a requested variable.
    let span = output.id - lo + 1;
    let mut depends = vec![false; span];
    for w in wrt {
        depends[w.id - lo] = true;
    }
    {
        let nodes = graph.nodes.borrow();
        for i in lo..=output.id {
            if depends[i - lo] {
                continue;
            }
            depends[i - lo] = inputs(&nodes[i].op).iter().any(|&j| j >= lo && depends[j - lo]);
        }
    }

    let mut adjoint: Vec<Option<Var<'g>>> = vec![None; span];
    adjoint[span - 1] = Some(graph.constant(Tensor::full(out_value.shape(), 1.0)));
    for i in (lo..=output.id).rev() {
        if !depends[i - lo] {
            continue;
        }
        let Some(upstream) = adjoint[i - lo] else {
            continue;
        };
        let op = graph.op(i);
        if matches!(op, Op::Leaf) {
            continue;
        }
        for (input, contribution) in vjp(graph, i, &op, upstream)? {
            if input < lo || !depends[input - lo] {
                continue;
            }
            let slot = &mut adjoint[input - lo];
            *slot = Some(match slot.take() {
                Some(prev) => prev.add(contribution)?,
                None => contribution,
            });
        }
    }

    let mut entries = HashMap::with_capacity(wrt.len());
    if create_graph {
        for w in wrt {
            let g = match adjoint[w.id - lo] {
                Some(g) => g,
                None => graph.constant(Tensor::zeros(&w.shape())),
            };
            entries.insert(w.id, g);
        }
    } else {
        let values: Vec<(usize, Tensor)> = wrt
            .iter()
            .map(|w| {
                let t = match adjoint[w.id - lo] {
                    Some(g) => (*g.value()).clone(),
                    None => Tensor::zeros(&w.shape()),
                };
                (w.id, t)
            })
            .collect();
        graph.truncate(mark);
        for (id, t) in values {
            entries.insert(id, graph.constant(t));
        }
    }
    Ok(GradientMap { entries })
}

/// Input adjoints of node `id` given its upstream adjoint `g`.
fn vjp<'g>(graph: &'g Graph, id: usize, op: &Op, g: Var<'g>) -> Result<Vec<(usize, Var<'g>)>> {
    let var = |i: usize| Var { graph, id: i };
    let this = var(id);
    let shape_of = |i: usize| graph.value(i).shape().to_vec();
    Ok(match *op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(a, g.sum_to(&shape_of(a))?), (b, g.sum_to(&shape_of(b))?)],
        Op::Sub(a, b) => vec![(a, g.sum_to(&shape_of(a))?), (b, g.neg()?.sum_to(&shape_of(b))?)],
        Op::Mul(a, b) => vec![
            (a, g.mul(var(b))?.sum_to(&shape_of(a))?),
            (b, g.mul(var(a))?.sum_to(&shape_of(b))?),
        ],
        Op::Div(a, b) => {
            let ga = g.div(var(b))?;
            // d(a/b)/db = -(a/b)/b
            let gb = g.mul(this)?.div(var(b))?.neg()?;
            vec![(a, ga.sum_to(&shape_of(a))?), (b, gb.sum_to(&shape_of(b))?)]
        }
        Op::Scale(a, k) => vec![(a, g.scale(k)?)],
        Op::MatMul { a, b, ta, tb } => {
            let (va, vb) = (var(a), var(b));
            let (da, db) = match (ta, tb) {
                (false, false) => (g.matmul_t(vb, false, true)?, va.matmul_t(g, true, false)?),
                (false, true) => (g.matmul_t(vb, false, false)?, g.matmul_t(va, true, false)?),
                (true, false) => (vb.matmul_t(g, false, true)?, va.matmul_t(g, false, false)?),
                (true, true) => (vb.matmul_t(g, true, true)?, g.matmul_t(va, true, true)?),
            };
            vec![(a, da), (b, db)]
        }
        Op::Relu(a) => {
            let x = graph.value(a);
            let mask: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            let mask = graph.constant(Tensor::from_parts(x.shape().to_vec(), mask));
            vec![(a, g.mul(mask)?)]
        }
        Op::Sigmoid(a) => {
            let one_minus = graph.scalar(1.0).sub(this)?;
            vec![(a, g.mul(this)?.mul(one_minus)?)]
        }
        Op::Tanh(a) => {
            let d = graph.scalar(1.0).sub(this.mul(this)?)?;
            vec![(a, g.mul(d)?)]
        }
        Op::Exp(a) => vec![(a, g.mul(this)?)],
        Op::Log(a) => vec![(a, g.div(var(a))?)],
        Op::Pow(a, p) => {
            if p == 0.0 {
                vec![(a, graph.constant(Tensor::zeros(&shape_of(a))))]
            } else {
                let d = var(a).powf(p - 1.0)?.scale(p)?;
                vec![(a, g.mul(d)?)]
            }
        }
        Op::SumTo(a) => vec![(a, g.broadcast_to(&shape_of(a))?)],
        Op::BroadcastTo(a) => vec![(a, g.sum_to(&shape_of(a))?)],
        Op::Mean(a) => {
            let shape = shape_of(a);
            let n = shape.iter().product::<usize>() as f64;
            vec![(a, g.scale(1.0 / n)?.broadcast_to(&shape)?)]
        }
        Op::L2Norm(a) => {
            if this.item() == 0.0 {
                vec![(a, graph.constant(Tensor::zeros(&shape_of(a))))]
            } else {
                vec![(a, var(a).mul(g.div(this)?)?)]
            }
        }
        Op::Softmax(a) => {
            // y ⊙ (g − Σ_row g⊙y)
            let gy = g.mul(this)?;
            let rows = this.value().view().0;
            let row_sums = if this.shape().len() == 2 {
                gy.sum_to(&[rows, 1])?
            } else {
                gy.sum()?
            };
            vec![(a, this.mul(g.sub(row_sums)?)?)]
        }
        Op::CrossEntropy(a, ref labels) => {
            let logits = var(a);
            let (r, c) = logits.value().view();
            let mut onehot = vec![0.0; r * c];
            for (i, &l) in labels.iter().enumerate() {
                onehot[i * c + l] = 1.0;
            }
            let onehot = graph.constant(Tensor::from_parts(vec![r, c], onehot));
            let diff = logits.softmax()?.sub(onehot)?;
            vec![(a, diff.mul(g.scale(1.0 / r as f64)?)?)]
        }
        Op::Mse(a, b) => {
            let n = graph.value(a).len() as f64;
            let d = var(a).sub(var(b))?;
            let ga = d.mul(g.scale(2.0 / n)?)?;
            vec![(a, ga), (b, ga.neg()?)]
        }
        Op::Concat(ref parts, axis) => {
            let mut out = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for &p in parts {
                let shape = shape_of(p);
                let width = if shape.len() == 1 { shape[0] } else { shape[axis] };
                out.push((p, g.slice(axis, offset, offset + width)?));
                offset += width;
            }
            out
        }
        Op::Reshape(a) => vec![(a, g.reshape(&shape_of(a))?)],
        Op::Slice { src, axis, start } => {
            let shape = shape_of(src);
            let gshape = g.shape();
            let len = if shape.len() == 1 { gshape[0] } else { gshape[axis] };
            let total = if shape.len() == 1 { shape[0] } else { shape[axis] };
            let padding = |width: usize| {
                let mut s = shape.clone();
                if s.len() == 1 {
                    s[0] = width;
                } else {
                    s[axis] = width;
                }
                graph.constant(Tensor::zeros(&s))
            };
            let mut pieces = Vec::with_capacity(3);
            if start > 0 {
                pieces.push(padding(start));
            }
            pieces.push(g);
            if start + len < total {
                pieces.push(padding(total - start - len));
            }
            let full = if pieces.len() == 1 { g } else { concat(&pieces, axis)? };
            vec![(src, full)]
        }
    })
}
