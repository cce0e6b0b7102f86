use std::borrow::Cow;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize, len: usize },
    SliceRows { src: Var, start: usize, len: usize },
    StackRows(Vec<Var>),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in execution order so that [`Tape::backward`]
/// can replay their adjoints in reverse.
///
/// Leaves may borrow their tensors (model parameters, cached encoder states)
/// for the lifetime of the tape instead of copying them.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to every leaf of the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; zeros if the leaf did not influence the output.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn add_grad(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// Differentiable leaf borrowing `value`.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Differentiable leaf owning `value`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Constant, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = tx.dims2();
        if tx.rank() != 2 || tb.len() != n || tb.dims2().0 != 1 {
            return Err(dim_err("add_bias", tx, tb));
        }
        let mut out = tx.clone();
        let bias_data = tb.data();
        for r in 0..m {
            for (o, b) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(bias_data) {
                *o += b;
            }
        }
        Ok(self.derived(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.derived(out, Op::Scale(a, factor), &[a])
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let first_t = self.value(*first);
        let rows = first_t.dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.dims2().0 != rows {
                return Err(dim_err("concat", first_t, t));
            }
            widths.push(t.dims2().1);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        Ok(self.derived(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        let (m, n) = t.dims2();
        if t.rank() != 2 || len == 0 || start + len > n {
            return Err(Error::Dimension {
                op: "slice",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![m, len], data);
        Ok(self.derived(out, Op::Slice { src, start, len }, &[src]))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        let (m, n) = t.dims2();
        if t.rank() != 2 || len == 0 || start + len > m {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let data = t.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_parts(vec![len, n], data);
        Ok(self.derived(out, Op::SliceRows { src, start, len }, &[src]))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let first_t = self.value(*first);
        let cols = first_t.dims2().1;
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.dims2().1 != cols {
                return Err(dim_err("stack_rows", first_t, t));
            }
            rows += t.dims2().0;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.derived(out, Op::StackRows(parts.to_vec()), parts))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.derived(out, Op::Transpose(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::sigmoid);
        self.derived(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.derived(out, Op::Tanh(a), &[a])
    }

    /// Softmax over the last axis of each row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = tensor::softmax_rows(self.value(a));
        self.derived(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = tensor::log_softmax_rows(self.value(a));
        self.derived(out, Op::LogSoftmax(a), &[a])
    }

    /// Gathers rows `ids` of a `[vocab, dim]` table into an `[ids.len(), dim]` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, e) = t.dims2();
        if t.rank() != 2 || ids.is_empty() {
            return Err(Error::Dimension {
                op: "embedding",
                left: t.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Contract(format!("token id {bad} outside table of {v} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            data.extend_from_slice(t.row_slice(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), e], data);
        Ok(self.derived(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::from_parts(root_value.shape().to_vec(), vec![1.0]));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf => {
                    if grads[idx].is_none() {
                        grads[idx] = Some(Tensor::zeros(node.value.shape()));
                    }
                }
                _ => grads[idx] = None,
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        let y = &*node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    add_grad(&mut grads[a.0], tensor::matmul_nt(g, self.value(*b)));
                }
                if wants(b) {
                    add_grad(&mut grads[b.0], tensor::matmul_tn(self.value(*a), g));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    add_grad(&mut grads[a.0], g.clone());
                }
                if wants(b) {
                    add_grad(&mut grads[b.0], g.clone());
                }
            }
            Op::AddBias(x, bias) => {
                if wants(x) {
                    add_grad(&mut grads[x.0], g.clone());
                }
                if wants(bias) {
                    let (m, n) = g.dims2();
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for (d, v) in db.iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    add_grad(&mut grads[bias.0], Tensor::from_parts(shape, db));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    add_grad(&mut grads[a.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
                if wants(b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    add_grad(&mut grads[b.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Scale(a, factor) => {
                if wants(a) {
                    add_grad(&mut grads[a.0], g.map(|v| v * factor));
                }
            }
            Op::Concat(parts) => {
                let rows = g.dims2().0;
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).dims2().1;
                    if wants(p) {
                        let mut d = Vec::with_capacity(rows * width);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row_slice(r)[offset..offset + width]);
                        }
                        add_grad(&mut grads[p.0], Tensor::from_parts(vec![rows, width], d));
                    }
                    offset += width;
                }
            }
            Op::Slice { src, start, len } => {
                if wants(src) {
                    let src_shape = self.value(*src).shape().to_vec();
                    let (m, n) = (src_shape[0], src_shape[1]);
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        d[r * n + start..r * n + start + len].copy_from_slice(g.row_slice(r));
                    }
                    add_grad(&mut grads[src.0], Tensor::from_parts(src_shape, d));
                }
            }
            Op::SliceRows { src, start, len } => {
                if wants(src) {
                    let src_shape = self.value(*src).shape().to_vec();
                    let n = src_shape[1];
                    let mut d = vec![0.0; src_shape[0] * n];
                    d[start * n..(start + len) * n].copy_from_slice(g.data());
                    add_grad(&mut grads[src.0], Tensor::from_parts(src_shape, d));
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let n = shape[0] * shape[1];
                    if wants(p) {
                        let d = g.data()[offset..offset + n].to_vec();
                        add_grad(&mut grads[p.0], Tensor::from_parts(shape, d));
                    }
                    offset += n;
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    let gt = tensor::transpose(g).expect("transpose of a matrix gradient");
                    add_grad(&mut grads[a.0], gt);
                }
            }
            Op::Sigmoid(a) => {
                if wants(a) {
                    let d = g.data().iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                    add_grad(&mut grads[a.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Tanh(a) => {
                if wants(a) {
                    let d = g.data().iter().zip(y.data()).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                    add_grad(&mut grads[a.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Softmax(a) => {
                if wants(a) {
                    let (m, n) = y.dims2();
                    let mut d = Vec::with_capacity(m * n);
                    for r in 0..m {
                        let (gr, yr) = (g.row_slice(r), y.row_slice(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        d.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                    }
                    add_grad(&mut grads[a.0], Tensor::from_parts(y.shape().to_vec(), d));
                }
            }
            Op::LogSoftmax(a) => {
                if wants(a) {
                    let (m, n) = y.dims2();
                    let mut d = Vec::with_capacity(m * n);
                    for r in 0..m {
                        let (gr, yr) = (g.row_slice(r), y.row_slice(r));
                        let total: f64 = gr.iter().sum();
                        d.extend(gr.iter().zip(yr).map(|(gv, lv)| gv - lv.exp() * total));
                    }
                    add_grad(&mut grads[a.0], Tensor::from_parts(y.shape().to_vec(), d));
                }
            }
            Op::Embedding { table, ids } => {
                if wants(table) {
                    let shape = self.value(*table).shape().to_vec();
                    let e = shape[1];
                    let mut d = vec![0.0; shape[0] * e];
                    for (r, &id) in ids.iter().enumerate() {
                        for (dv, gv) in d[id * e..(id + 1) * e].iter_mut().zip(g.row_slice(r)) {
                            *dv += gv;
                        }
                    }
                    add_grad(&mut grads[table.0], Tensor::from_parts(shape, d));
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    let shape = self.value(*a).shape();
                    add_grad(&mut grads[a.0], Tensor::full(shape, g.data()[0]));
                }
            }
        }
    }
}
