use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::{ParamGrads, ParamId, ParamStore, Tensor};
use crate::error::TensorError;

type TResult<T> = Result<T, TensorError>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Ln(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows { table: usize, ids: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    GatherCols { x: usize, cols: Vec<usize> },
    Pick { x: usize, idx: Vec<(usize, usize)> },
    Sum(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Ln(_) => "ln",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherCols { .. } => "gather_cols",
            Op::Pick { .. } => "pick",
            Op::Sum(_) => "sum",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Ln(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { table, .. } => vec![*table],
            Op::SliceCols { x, .. } | Op::GatherCols { x, .. } | Op::Pick { x, .. } => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` only for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// A single-use computation tape.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction. Parameter leaves borrow their values from a
/// [`ParamStore`] instead of copying them.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    detached: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A tape without a parameter store, for standalone tensor math.
    pub fn new() -> Self {
        Self { params: None, nodes: Vec::new(), param_nodes: HashMap::new(), detached: false }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self { params: Some(params), ..Self::new() }
    }

    /// A tape that never tracks gradients, whatever the leaves say.
    pub fn detached(params: &'p ParamStore) -> Self {
        Self { detached: true, ..Self::with_params(params) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param node without store").value(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> TResult<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = !self.detached && op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { op, value: Some(value), requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> TResult<Var> {
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { op: Op::Leaf, value: Some(t), requires_grad: requires_grad && !self.detached });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> TResult<Var> {
        self.input(t, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so
    /// fan-out from a parameter accumulates on one gradient slot.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let requires_grad = !self.detached && store.get(id).requires_grad;
        self.nodes.push(Node { op: Op::Param(id), value: None, requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> TResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dimension { op: "matmul", a: sa.to_vec(), b: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMul(a.0, b.0), Tensor::new(vec![m, n], out)?)
    }

    pub fn transpose(&mut self, a: Var) -> TResult<Var> {
        let (m, n) = self.dims2(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Op::Transpose(a.0), Tensor::new(vec![n, m], out)?)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TResult<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Dimension { op, a: self.shape(a).to_vec(), b: self.shape(b).to_vec() });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor { shape: ta.shape().to_vec(), data }
    }

    pub fn add(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a.0, b.0), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), t)
    }

    /// `x[..×n] + bias[n]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> TResult<Var> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(TensorError::Dimension { op: "add_row_bias", a: self.shape(x).to_vec(), b: self.shape(bias).to_vec() });
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push(Op::AddRowBias(x.0, bias.0), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> TResult<Var> {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|v| *v *= c);
        self.push(Op::Scale(a.0, c), t)
    }

    pub fn gelu(&mut self, a: Var) -> TResult<Var> {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        self.push(Op::Gelu(a.0), t)
    }

    /// Elementwise natural log.
    pub fn ln(&mut self, a: Var) -> TResult<Var> {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|v| *v = v.ln());
        self.push(Op::Ln(a.0), t)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> TResult<Var> {
        self.softmax_inner(a, None)
    }

    /// Softmax along the last axis where `allowed[r*n + j]` gates entry
    /// `(r, j)`. Disallowed entries come out exactly zero. The mask cycles
    /// every `allowed.len()` elements, so one `T×T` mask serves stacked heads.
    pub fn masked_softmax(&mut self, a: Var, allowed: Rc<[bool]>) -> TResult<Var> {
        self.softmax_inner(a, Some(allowed))
    }

    fn softmax_inner(&mut self, a: Var, allowed: Option<Rc<[bool]>>) -> TResult<Var> {
        let x = self.value(a);
        let n = x.cols();
        if let Some(m) = &allowed {
            if m.len() % n != 0 || x.len() % m.len() != 0 {
                return Err(TensorError::Dimension { op: "masked_softmax", a: x.shape().to_vec(), b: vec![m.len()] });
            }
        }
        let mut out = vec![0.0; x.len()];
        for (r, (xr, or)) in x.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let mask = allowed.as_ref().map(|m| {
                let per = m.len() / n;
                let rr = r % per;
                &m[rr * n..(rr + 1) * n]
            });
            if mask.is_some_and(|m| !m.iter().any(|&b| b)) {
                return Err(TensorError::Dimension { op: "masked_softmax: fully masked row", a: x.shape().to_vec(), b: vec![r] });
            }
            kernels::softmax_row(xr, mask, or);
        }
        let t = Tensor { shape: x.shape().to_vec(), data: out };
        self.push(Op::Softmax(a.0), t)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> TResult<Var> {
        let x = self.value(a);
        let n = x.cols();
        let mut out = vec![0.0; x.len()];
        for (xr, or) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            kernels::log_softmax_row(xr, or);
        }
        let t = Tensor { shape: x.shape().to_vec(), data: out };
        self.push(Op::LogSoftmax(a.0), t)
    }

    /// Per-row layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> TResult<Var> {
        let n = self.value(x).cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(TensorError::Dimension { op: "layer_norm", a: self.shape(x).to_vec(), b: self.shape(gain).to_vec() });
        }
        let xt = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xt.rows();
        let mut xhat = vec![0.0; xt.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xt.len()];
        for r in 0..rows {
            let row = &xt.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor { shape: xt.shape().to_vec(), data: out };
        self.push(Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, rstd }, t)
    }

    /// Rows of a 2-D `table` selected by `ids`, e.g. an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> TResult<Var> {
        let (rows, n) = self.dims2(table);
        if ids.is_empty() {
            return Err(TensorError::InvalidShape(vec![0, n]));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index { what: "row", index: id, size: rows });
            }
            out.extend_from_slice(&src[id * n..(id + 1) * n]);
        }
        self.push(Op::GatherRows { table: table.0, ids: ids.to_vec() }, Tensor::new(vec![ids.len(), n], out)?)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> TResult<Var> {
        let (m, n) = self.dims2(x);
        if len == 0 || start + len > n {
            return Err(TensorError::Index { what: "column", index: start + len, size: n });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        self.push(Op::SliceCols { x: x.0, start }, Tensor::new(vec![m, len], out)?)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> TResult<Var> {
        let m = self.dims2(xs[0]).0;
        let widths: Vec<usize> = xs.iter().map(|&v| self.dims2(v).1).collect();
        for &v in xs {
            if self.dims2(v).0 != m {
                return Err(TensorError::Dimension { op: "concat_cols", a: self.shape(xs[0]).to_vec(), b: self.shape(v).to_vec() });
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let op = Op::ConcatCols(xs.iter().map(|v| v.0).collect());
        self.push(op, Tensor::new(vec![m, total], out)?)
    }

    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> TResult<Var> {
        let (m, n) = self.dims2(x);
        if cols.is_empty() {
            return Err(TensorError::InvalidShape(vec![m, 0]));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= n) {
            return Err(TensorError::Index { what: "column", index: c, size: n });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * cols.len());
        for r in 0..m {
            out.extend(cols.iter().map(|&c| src[r * n + c]));
        }
        self.push(Op::GatherCols { x: x.0, cols: cols.to_vec() }, Tensor::new(vec![m, cols.len()], out)?)
    }

    /// Vector of the elements at `(row, col)` pairs of a 2-D view of `x`.
    pub fn pick(&mut self, x: Var, idx: &[(usize, usize)]) -> TResult<Var> {
        let (m, n) = self.dims2(x);
        if idx.is_empty() {
            return Err(TensorError::InvalidShape(vec![0]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= m {
                return Err(TensorError::Index { what: "row", index: r, size: m });
            }
            if c >= n {
                return Err(TensorError::Vocabulary { token: c, vocab: n });
            }
            out.push(src[r * n + c]);
        }
        self.push(Op::Pick { x: x.0, idx: idx.to_vec() }, Tensor::vector(out))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> TResult<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a.0), Tensor::scalar(s))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> TResult<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        let params = self.param_nodes.iter().map(|(&id, &v)| (id, v.0)).collect();
        Ok(Gradients { grads, params })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], j: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[j].requires_grad {
            return None;
        }
        let n = self.value(Var(j)).len();
        Some(grads[j].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = self.value(Var(i));
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(Var(*a)), self.value(Var(*b)));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    matmul_a_bt_acc(dy, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    matmul_at_b_acc(ta.data(), dy, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (y.shape()[0], y.shape()[1]);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += dy[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gb.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gb.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(Var(*a)).data(), self.value(Var(*b)).data());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((g, d), v) in ga.iter_mut().zip(dy).zip(tb) {
                        *g += d * v;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((g, d), v) in gb.iter_mut().zip(dy).zip(ta) {
                        *g += d * v;
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                let n = y.cols();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for row in dy.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(Var(*a)).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((g, d), &v) in ga.iter_mut().zip(dy).zip(x) {
                        *g += d * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Ln(a) => {
                let x = self.value(Var(*a)).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((g, d), &v) in ga.iter_mut().zip(dy).zip(x) {
                        *g += d / v;
                    }
                }
            }
            Op::Softmax(a) => {
                let n = y.cols();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((yr, dr), gr) in y.data().chunks(n).zip(dy.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = y.cols();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((yr, dr), gr) in y.data().chunks(n).zip(dy.chunks(n)).zip(ga.chunks_mut(n)) {
                        let total: f64 = dr.iter().sum();
                        for j in 0..n {
                            gr[j] += dr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = y.cols();
                let g = self.value(Var(*gain)).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let dr = &dy[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let dh = dr[j] * g[j];
                            mean_d += dh;
                            mean_dh += dh * hr[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            let dh = dr[j] * g[j];
                            gx[r * n + j] += rs * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if let Some(gg) = self.grad_slot(grads, *gain) {
                    for (dr, hr) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += dr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for dr in dy.chunks(n) {
                        gb.iter_mut().zip(dr).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let n = y.cols();
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            gt[id * n + j] += dy[r * n + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let len = y.cols();
                let n = self.value(Var(*x)).cols();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, dr) in dy.chunks(len).enumerate() {
                        for j in 0..len {
                            gx[r * n + start + j] += dr[j];
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = y.cols();
                let mut off = 0;
                for &x in xs {
                    let w = self.value(Var(x)).cols();
                    if let Some(gx) = self.grad_slot(grads, x) {
                        for (r, dr) in dy.chunks(total).enumerate() {
                            for j in 0..w {
                                gx[r * w + j] += dr[off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::GatherCols { x, cols } => {
                let w = cols.len();
                let n = self.value(Var(*x)).cols();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, dr) in dy.chunks(w).enumerate() {
                        for (j, &c) in cols.iter().enumerate() {
                            gx[r * n + c] += dr[j];
                        }
                    }
                }
            }
            Op::Pick { x, idx } => {
                let n = self.value(Var(*x)).cols();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (d, &(r, c)) in dy.iter().zip(idx) {
                        gx[r * n + c] += d;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
        }
    }
}

/// Result of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of the parameter leaves, in store order.
    pub fn param_grads(&self, n_params: usize) -> ParamGrads {
        let mut out = ParamGrads::new(n_params);
        let mut params = self.params.clone();
        params.sort();
        for (id, node) in params {
            if let Some(g) = self.grads.get(node).and_then(|g| g.as_deref()) {
                out.add(id, g);
            }
        }
        out
    }
}
