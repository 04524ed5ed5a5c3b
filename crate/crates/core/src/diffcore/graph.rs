use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Concat(Vec<Var>),
    MaskedSum(Var, Vec<f64>),
    MaskedLogSumExp(Var, Vec<f64>),
    L2Normalize(Var, f64),
    LogSoftmax(Var),
    Sum(Var),
    Pick(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use record of a forward pass.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf (parameters, or inputs that need gradients).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.grad_of(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let out = ta.zip_map(tb, |x, y| x + y);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.shape().len() != 1 || ta.cols() != tb.len() {
            return Err(mismatch("add_bias", ta, tb));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let rg = self.grad_of(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.grad_of(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.grad_of(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let lead = &self.value(*first).shape()[..self.value(*first).shape().len() - 1];
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            let s = t.shape();
            if &s[..s.len() - 1] != lead {
                return Err(mismatch("concat", self.value(*first), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        let rg = self.grad_of(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Sum of the last axis weighted by a 0/1 mask; the last axis shrinks to 1.
    pub fn masked_sum(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let t = self.value(a);
        if t.cols() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_sum",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data: Vec<f64> = (0..t.rows())
            .map(|r| t.row(r).iter().zip(mask).map(|(x, m)| x * m).sum())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let out = Tensor::new(shape, data)?;
        let rg = self.grad_of(&[a]);
        Ok(self.push(out, Op::MaskedSum(a, mask.to_vec()), rg))
    }

    /// Log-sum-exp of the last-axis entries where `mask` is 1; the last axis shrinks to 1.
    pub fn masked_log_sum_exp(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let t = self.value(a);
        if t.cols() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_log_sum_exp",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m != 0.0) {
            return Err(Error::Degenerate("masked_log_sum_exp: empty mask".into()));
        }
        let data: Vec<f64> = (0..t.rows())
            .map(|r| {
                let sel: Vec<f64> = t
                    .row(r)
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m != 0.0)
                    .map(|(&x, _)| x)
                    .collect();
                log_sum_exp(&sel)
            })
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let out = Tensor::new(shape, data)?;
        let rg = self.grad_of(&[a]);
        Ok(self.push(out, Op::MaskedLogSumExp(a, mask.to_vec()), rg))
    }

    /// Row-wise unit normalization; any zero-norm row is an error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.l2_normalize_floored(a, 0.0)
    }

    /// Row-wise `v / max(||v||, floor)`. With `floor == 0` a zero row is an error.
    pub fn l2_normalize_floored(&mut self, a: Var, floor: f64) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows() {
            let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 && floor <= 0.0 {
                return Err(Error::Degenerate(format!("l2_normalize: row {r} has zero norm")));
            }
            let n = n.max(floor);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        let rg = self.grad_of(&[a]);
        Ok(self.push(out, Op::L2Normalize(a, floor), rg))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.grad_of(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.grad_of(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Gathers `a[r, index[r]]` for each row, giving a `[rows]` vector.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != index.len() {
            return Err(Error::ShapeMismatch {
                op: "pick",
                left: t.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(index.len());
        for (r, &i) in index.iter().enumerate() {
            if i >= cols {
                return Err(Error::InvalidArgument(format!(
                    "pick: index {i} out of range for {cols} columns"
                )));
            }
            data.push(t.row(r)[i]);
        }
        let out = Tensor::vector(data);
        let rg = self.grad_of(&[a]);
        Ok(self.push(out, Op::Pick(a, index.to_vec()), rg))
    }

    /// Reverse sweep from `loss`. The graph cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(&loss_shape, 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient at node {idx}")));
            }
            let mut send = |v: Var, t: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    out.grads.insert(Var(idx), g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.nodes[a.0].requires_grad {
                        send(*a, g.matmul(&tb.transpose()?)?);
                    }
                    if self.nodes[b.0].requires_grad {
                        send(*b, ta.transpose()?.matmul(&g)?);
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose()?),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddBias(a, b) => {
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    send(*b, Tensor::vector(gb));
                    send(*a, g);
                }
                Op::Scale(a, f) => send(*a, g.map(|x| x * f)),
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    send(*a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let t = &self.nodes[p.0].value;
                        let c = t.cols();
                        let mut data = Vec::with_capacity(t.len());
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        offset += c;
                        send(*p, Tensor::new(t.shape().to_vec(), data)?);
                    }
                }
                Op::MaskedSum(a, mask) => {
                    let t = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(t.shape());
                    for r in 0..t.rows() {
                        let gr = g.data()[r];
                        for (o, m) in ga.row_mut(r).iter_mut().zip(mask) {
                            *o = gr * m;
                        }
                    }
                    send(*a, ga);
                }
                Op::MaskedLogSumExp(a, mask) => {
                    let t = &self.nodes[a.0].value;
                    let y = &node.value;
                    let mut ga = Tensor::zeros(t.shape());
                    for r in 0..t.rows() {
                        let (gr, lse) = (g.data()[r], y.data()[r]);
                        for ((o, x), m) in ga.row_mut(r).iter_mut().zip(t.row(r)).zip(mask) {
                            if *m != 0.0 {
                                *o = gr * (x - lse).exp();
                            }
                        }
                    }
                    send(*a, ga);
                }
                Op::L2Normalize(a, floor) => {
                    let x = &self.nodes[a.0].value;
                    let y = &node.value;
                    let mut ga = Tensor::zeros(x.shape());
                    for r in 0..x.rows() {
                        let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (gr, yr) = (g.row(r), y.row(r));
                        let out = ga.row_mut(r);
                        if n < *floor {
                            for (o, gv) in out.iter_mut().zip(gr) {
                                *o = gv / floor;
                            }
                        } else {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                                *o = (gv - yv * dot) / n;
                            }
                        }
                    }
                    send(*a, ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let gr = g.row(r);
                        let total: f64 = gr.iter().sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(y.row(r)) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    send(*a, ga);
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    send(*a, Tensor::filled(&shape, g.item()));
                }
                Op::Pick(a, index) => {
                    let t = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(t.shape());
                    for (r, &i) in index.iter().enumerate() {
                        ga.row_mut(r)[i] = g.data()[r];
                    }
                    send(*a, ga);
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
