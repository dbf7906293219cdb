//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking the node list backwards is a valid reverse
//! topological order. The graph is dropped after `backward`.

use std::collections::HashMap;
use std::ops::Range;

use super::{matmul_raw, ParamId, ParamStore, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    SoftmaxRows,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Activation, Var),
    LayerNorm(Var, f64),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatRows(Vec<Var>),
    MeanRows(Var, usize, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

type OpResult = Result<Var, TensorError>;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn softmax_rows_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut z = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - max).exp();
            z += *ov;
        }
        for ov in o.iter_mut() {
            *ov /= z;
        }
    }
    out
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape. Repeated calls with the same
    /// id return the same node, so every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = Tensor {
            shape: vec![m, n],
            data: matmul_raw(&ta.data, &tb.data, m, k, n),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[m×n] + bias[1×n]`, the bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> OpResult {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = tx.dims2("add_row")?;
        if tb.shape() != [1, n] {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data.clone();
        for r in 0..m {
            for (v, b) in data[r * n..(r + 1) * n].iter_mut().zip(&tb.data) {
                *v += b;
            }
        }
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// `x[m×n] ⊙ row[1×n]`, the row broadcast over rows of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> OpResult {
        let (tx, tr) = (self.value(x), self.value(row));
        let (m, n) = tx.dims2("mul_row")?;
        if tr.shape() != [1, n] {
            return Err(TensorError::Shape {
                op: "mul_row",
                lhs: tx.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let mut data = tx.data.clone();
        for r in 0..m {
            for (v, k) in data[r * n..(r + 1) * n].iter_mut().zip(&tr.data) {
                *v *= k;
            }
        }
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).scale(k);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, k), rg)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> OpResult {
        let tx = self.value(x);
        let out = match kind {
            Activation::Tanh => tx.map(f64::tanh),
            Activation::Relu => tx.map(|v| v.max(0.0)),
            Activation::Sigmoid => tx.map(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::SoftmaxRows => {
                let (r, c) = tx.dims2("softmax_rows")?;
                Tensor {
                    shape: vec![r, c],
                    data: softmax_rows_raw(&tx.data, r, c),
                }
            }
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Act(kind, x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x).expect("elementwise")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x).expect("elementwise")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
            .expect("elementwise")
    }

    pub fn softmax_rows(&mut self, x: Var) -> OpResult {
        self.activation(Activation::SoftmaxRows, x)
    }

    /// Normalizes each row to zero mean and unit (population) variance.
    /// The affine rescale is left to the caller.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> OpResult {
        let tx = self.value(x);
        let (m, n) = tx.dims2("layer_norm_rows")?;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::LayerNorm(x, eps), rg))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> OpResult {
        let tt = self.value(table);
        let (rows, d) = tt.dims2("gather_rows")?;
        if ids.is_empty() {
            return Err(TensorError::Shape {
                op: "gather_rows",
                lhs: tt.shape().to_vec(),
                rhs: vec![0],
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        let rg = self.rg(table);
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> OpResult {
        let tx = self.value(x);
        let (m, n) = tx.dims2("transpose")?;
        let out = Tensor {
            shape: vec![n, m],
            data: super::transpose_raw(&tx.data, m, n),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> OpResult {
        let tx = self.value(x);
        let (m, n) = tx.dims2("slice_cols")?;
        if cols.start >= cols.end || cols.end > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: cols.end,
                extent: n,
            });
        }
        let w = cols.end - cols.start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&tx.row(r)[cols.clone()]);
        }
        let out = Tensor {
            shape: vec![m, w],
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols(x, cols.start, cols.end), rg))
    }

    pub fn slice_rows(&mut self, x: Var, rows: Range<usize>) -> OpResult {
        let tx = self.value(x);
        let (m, n) = tx.dims2("slice_rows")?;
        if rows.start >= rows.end || rows.end > m {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: rows.end,
                extent: m,
            });
        }
        let out = Tensor {
            shape: vec![rows.end - rows.start, n],
            data: tx.data[rows.start * n..rows.end * n].to_vec(),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows(x, rows.start, rows.end), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> OpResult {
        let first = parts.first().ok_or(TensorError::Shape {
            op: "concat_cols",
            lhs: vec![],
            rhs: vec![],
        })?;
        let (m, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2("concat_cols")?;
            if pm != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor {
            shape: vec![m, total],
            data,
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> OpResult {
        let first = parts.first().ok_or(TensorError::Shape {
            op: "concat_rows",
            lhs: vec![],
            rhs: vec![],
        })?;
        let (_, n) = self.value(*first).dims2("concat_rows")?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2("concat_rows")?;
            if pn != n {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            data.extend_from_slice(&self.value(p).data);
            m += pm;
        }
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean of rows `range` as a `1×d` row. An empty range yields zeros.
    pub fn mean_rows(&mut self, x: Var, range: Range<usize>) -> OpResult {
        let tx = self.value(x);
        let (m, n) = tx.dims2("mean_rows")?;
        if range.end > m || range.start > range.end {
            return Err(TensorError::Index {
                op: "mean_rows",
                index: range.end,
                extent: m,
            });
        }
        let mut data = vec![0.0; n];
        let len = range.end - range.start;
        if len > 0 {
            for r in range.clone() {
                for (o, v) in data.iter_mut().zip(tx.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / len as f64;
            for o in &mut data {
                *o *= inv;
            }
        }
        let out = Tensor {
            shape: vec![1, n],
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanRows(x, range.start, range.end), rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> OpResult {
        let tl = self.value(logits);
        let (b, c) = tl.dims2("cross_entropy")?;
        if targets.len() != b {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: t,
                extent: c,
            });
        }
        let probs = softmax_rows_raw(&tl.data, b, c);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| {
                    g.map(|data| Tensor {
                        shape: n.value.shape.clone(),
                        data,
                    })
                })
                .collect(),
        })
    }

    /// Runs `backward` and adds every parameter gradient into `store`.
    /// Trainable parameters without a path to the loss receive zeros.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g.data());
            }
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.trainable && p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                // dA = dC · Bᵀ
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · dC
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * x;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let n = self.nodes[bias.0].value.numel();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let tx = &self.nodes[x.0].value.data;
                let tr = &self.nodes[row.0].value.data;
                let n = tr.len();
                acc(*x, &mut |gx| {
                    for (r, grow) in g.chunks(n).enumerate() {
                        for ((o, d), k) in gx[r * n..(r + 1) * n].iter_mut().zip(grow).zip(tr) {
                            *o += d * k;
                        }
                    }
                });
                acc(*row, &mut |gr| {
                    for (grow, xrow) in g.chunks(n).zip(tx.chunks(n)) {
                        for ((o, d), xv) in gr.iter_mut().zip(grow).zip(xrow) {
                            *o += d * xv;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let ta = &self.nodes[a.0].value.data;
                let tb = &self.nodes[b.0].value.data;
                acc(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(tb) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(ta) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(x, k) => acc(*x, &mut |gx| {
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += k * v;
                }
            }),
            Op::Act(kind, x) => {
                let y = &node.value.data;
                let xin = &self.nodes[x.0].value;
                acc(*x, &mut |gx| match kind {
                    Activation::Tanh => {
                        for ((o, d), yv) in gx.iter_mut().zip(g).zip(y) {
                            *o += d * (1.0 - yv * yv);
                        }
                    }
                    Activation::Relu => {
                        for ((o, d), xv) in gx.iter_mut().zip(g).zip(&xin.data) {
                            if *xv > 0.0 {
                                *o += d;
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for ((o, d), yv) in gx.iter_mut().zip(g).zip(y) {
                            *o += d * yv * (1.0 - yv);
                        }
                    }
                    Activation::SoftmaxRows => {
                        let c = xin.shape[1];
                        for ((orow, drow), yrow) in
                            gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c))
                        {
                            let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((o, d), yv) in orow.iter_mut().zip(drow).zip(yrow) {
                                *o += yv * (d - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm(x, eps) => {
                let xin = &self.nodes[x.0].value;
                let y = &node.value.data;
                let n = xin.shape[1];
                acc(*x, &mut |gx| {
                    for r in 0..xin.shape[0] {
                        let row = xin.row(r);
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let d = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let mean_d = d.iter().sum::<f64>() / n as f64;
                        let mean_dy = d.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((o, dv), yv) in gx[r * n..(r + 1) * n].iter_mut().zip(d).zip(yr) {
                            *o += inv * (dv - mean_d - yv * mean_dy);
                        }
                    }
                });
            }
            Op::Gather(table, ids) => {
                let d = self.nodes[table.0].value.shape[1];
                acc(*table, &mut |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (node.value.shape[0], node.value.shape[1]);
                acc(*x, &mut |gx| {
                    // node is m×n, input is n×m
                    for i in 0..m {
                        for j in 0..n {
                            gx[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::SliceCols(x, s, e) => {
                let n = self.nodes[x.0].value.shape[1];
                let w = e - s;
                acc(*x, &mut |gx| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * n + s..r * n + e], grow);
                    }
                });
            }
            Op::SliceRows(x, s, e) => {
                let n = self.nodes[x.0].value.shape[1];
                acc(*x, &mut |gx| add_into(&mut gx[s * n..e * n], g));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape[1];
                    acc(p, &mut |gp| {
                        for (r, prow) in gp.chunks_mut(w).enumerate() {
                            add_into(prow, &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::MeanRows(x, s, e) => {
                if e > s {
                    let n = self.nodes[x.0].value.shape[1];
                    let inv = 1.0 / (e - s) as f64;
                    acc(*x, &mut |gx| {
                        for r in *s..*e {
                            for (o, d) in gx[r * n..(r + 1) * n].iter_mut().zip(g) {
                                *o += d * inv;
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.nodes[logits.0].value.shape[1];
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
