//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every primitive executed during a forward pass.
//! [`Graph::backward`] replays the tape in reverse execution order, visiting
//! each node exactly once and accumulating (never overwriting) gradients, so
//! shared subexpressions and repeated parameter uses come out right.
//!
//! Ops validate shapes up front and reject non-finite outputs immediately,
//! which keeps training failures close to their cause.

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;
use thiserror::Error;

/// Epsilon inside the layer-norm variance term.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Gather { table: ParamId, ids: Vec<usize> },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    ScalarMul(Var, f64),
    ScaleBy { x: Var, s: Var },
    ElemMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    SoftmaxRows { x: Var, mask: Option<Vec<bool>> },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Transpose(Var),
    SumRows(Var),
    SumAll(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    NegLogSoftmaxFirst(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Forward tape bound to a parameter store for the duration of one pass.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
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

    /// Clone a node value out of the tape (used to stage cached sub-results).
    pub fn detach(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    fn push(&mut self, op: &'static str, node_op: Op, value: Tensor) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op });
        }
        self.nodes.push(Node { value, op: node_op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf. No gradient flows into inputs.
    pub fn input(&mut self, value: Tensor) -> Var {
        debug_assert!(value.is_finite());
        self.nodes.push(Node { value, op: Op::Input });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; the same slot always maps to the same node within one graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.raw()] {
            return v;
        }
        let value = self.store.value(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.raw()] = Some(v);
        v
    }

    /// Row lookup into a parameter table; repeated ids accumulate on backward.
    pub fn gather_rows(&mut self, table: ParamId, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.store.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(NumericsError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {} out of range for table with {} rows", id, t.rows()),
                });
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            "gather_rows",
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(shape_err("matmul", format!("{}x{} . {}x{}", ar, ac, br, bc)));
        }
        let mut out = Tensor::zeros(ar, bc);
        {
            let av = self.value(a);
            let bv = self.value(b);
            matmul_into(av, bv, &mut out, false, false);
        }
        self.push("matmul", Op::MatMul(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(shape_err("add", format!("{:?} vs {:?}", sa, sb)));
        }
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += x;
        }
        self.push("add", Op::Add(a, b), out)
    }

    /// `x` is n x d, `row` is 1 x d, broadcast over rows (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (_, d) = self.value(x).shape();
        let (rr, rc) = self.value(row).shape();
        if rr != 1 || rc != d {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.value(x).shape(), (rr, rc)),
            ));
        }
        let mut out = self.value(x).clone();
        let b = self.nodes[row.0].value.data().to_vec();
        for r in 0..out.rows() {
            for (o, v) in out.row_mut(r).iter_mut().zip(b.iter()) {
                *o += v;
            }
        }
        self.push("add_row", Op::AddRow(x, row), out)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o += c;
        }
        self.push("add_const", Op::AddConst(x), out)
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= c;
        }
        self.push("scalar_mul", Op::ScalarMul(x, c), out)
    }

    /// Multiply every element of `x` by the 1 x 1 tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, NumericsError> {
        if self.value(s).shape() != (1, 1) {
            return Err(shape_err(
                "scale_by",
                format!("scale must be 1x1, got {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).item();
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= sv;
        }
        self.push("scale_by", Op::ScaleBy { x, s }, out)
    }

    pub fn elem_mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(shape_err("elem_mul", format!("{:?} vs {:?}", sa, sb)));
        }
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= x;
        }
        self.push("elem_mul", Op::ElemMul(a, b), out)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = o.tanh();
        }
        self.push("tanh", Op::Tanh(x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = sigmoid(*o);
        }
        self.push("sigmoid", Op::Sigmoid(x), out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = o.max(0.0);
        }
        self.push("relu", Op::Relu(x), out)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = o.exp();
        }
        self.push("exp", Op::Exp(x), out)
    }

    /// Row-wise softmax. Masked positions get -inf logits and come out exactly
    /// zero; a fully masked row comes out as all zeros.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        let (r, c) = self.value(x).shape();
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(shape_err(
                    "softmax_rows",
                    format!("mask length {} vs logits {}x{}", m.len(), r, c),
                ));
            }
        }
        let mut out = Tensor::zeros(r, c);
        {
            let xv = self.value(x);
            for i in 0..r {
                softmax_row_into(xv.row(i), mask.map(|m| &m[i * c..(i + 1) * c]), out.row_mut(i));
            }
        }
        self.push(
            "softmax_rows",
            Op::SoftmaxRows {
                x,
                mask: mask.map(|m| m.to_vec()),
            },
            out,
        )
    }

    /// Row-wise layer normalization with learnable gain and bias (both 1 x d).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (r, d) = self.value(x).shape();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.value(v).shape() != (1, d) {
                return Err(shape_err(
                    "layer_norm",
                    format!("{} shape {:?}, expected 1x{}", name, self.value(v).shape(), d),
                ));
            }
        }
        let mut out = Tensor::zeros(r, d);
        {
            let xv = self.value(x);
            let g = self.value(gain).data().to_vec();
            let b = self.value(bias).data().to_vec();
            for i in 0..r {
                let row = xv.row(i);
                let (mean, var) = mean_var(row);
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..d {
                    out.set(i, j, g[j] * (row[j] - mean) * inv + b[j]);
                }
            }
        }
        self.push("layer_norm", Op::LayerNorm { x, gain, bias }, out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.value(x).shape();
        let mut out = Tensor::zeros(c, r);
        {
            let xv = self.value(x);
            for i in 0..r {
                for j in 0..c {
                    out.set(j, i, xv.at(i, j));
                }
            }
        }
        self.push("transpose", Op::Transpose(x), out)
    }

    /// Sum over rows: n x d -> 1 x d.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.value(x).shape();
        let mut out = Tensor::zeros(1, c);
        {
            let xv = self.value(x);
            for i in 0..r {
                for (o, v) in out.row_mut(0).iter_mut().zip(xv.row(i)) {
                    *o += v;
                }
            }
        }
        self.push("sum_rows", Op::SumRows(x), out)
    }

    /// Sum of all entries: n x d -> 1 x 1.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, NumericsError> {
        let total: f64 = self.value(x).data().iter().sum();
        self.push("sum_all", Op::SumAll(x), Tensor::scalar(total))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ar != br {
            return Err(shape_err(
                "concat_cols",
                format!("{}x{} | {}x{}", ar, ac, br, bc),
            ));
        }
        let mut out = Tensor::zeros(ar, ac + bc);
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..ar {
                out.row_mut(i)[..ac].copy_from_slice(av.row(i));
                out.row_mut(i)[ac..].copy_from_slice(bv.row(i));
            }
        }
        self.push("concat_cols", Op::ConcatCols(a, b), out)
    }

    /// Stack tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Invalid {
                op: "concat_rows",
                msg: "no parts".into(),
            });
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).shape();
            if c != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("column counts differ: {} vs {}", cols, c),
                ));
            }
            rows += r;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            for i in 0..pv.rows() {
                out.row_mut(at).copy_from_slice(pv.row(i));
                at += 1;
            }
        }
        self.push("concat_rows", Op::ConcatRows(parts.to_vec()), out)
    }

    /// `-log softmax(x)[0]` for a 1 x n row of logits, computed with
    /// max-subtraction. This is the listwise ranking loss with the positive
    /// score in column 0.
    pub fn neg_log_softmax_first(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.value(x).shape();
        if r != 1 || c == 0 {
            return Err(shape_err(
                "neg_log_softmax_first",
                format!("expected 1xN logits, got {}x{}", r, c),
            ));
        }
        let row = self.value(x).row(0);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let loss = m + sum.ln() - row[0];
        self.push(
            "neg_log_softmax_first",
            Op::NegLogSoftmaxFirst(x),
            Tensor::scalar(loss),
        )
    }

    /// Reverse sweep from a scalar loss. Gradients for parameter leaves are
    /// accumulated into the returned [`ParamGrads`].
    pub fn backward(&self, loss: Var) -> Result<ParamGrads, NumericsError> {
        if self.value(loss).shape() != (1, 1) {
            return Err(NumericsError::Invalid {
                op: "backward",
                msg: format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut sink = ParamGrads::new(self.store.len());

        for i in (0..self.nodes.len()).rev() {
            // All consumers have larger indices and are already processed, so
            // this node's gradient is final.
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => sink.accumulate(*id, &g),
                Op::Gather { table, ids } => {
                    let cols = g.cols();
                    let shape = self.store.value(*table).shape();
                    let slot = sink.entry(*table, shape);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = slot.row_mut(id);
                        for (d, v) in dst.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                            *d += v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    matmul_into(&g, bv, &mut da, false, true);
                    add_grad(&mut grads[a.0], &da);
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    matmul_into(av, &g, &mut db, true, false);
                    add_grad(&mut grads[b.0], &db);
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads[a.0], &g);
                    add_grad(&mut grads[b.0], &g);
                }
                Op::AddRow(x, row) => {
                    add_grad(&mut grads[x.0], &g);
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    add_grad(&mut grads[row.0], &dr);
                }
                Op::AddConst(x) => add_grad(&mut grads[x.0], &g),
                Op::ScalarMul(x, c) => {
                    let mut dx = g.clone();
                    for v in dx.data_mut() {
                        *v *= c;
                    }
                    add_grad(&mut grads[x.0], &dx);
                }
                Op::ScaleBy { x, s } => {
                    let sv = self.nodes[s.0].value.item();
                    let xv = &self.nodes[x.0].value;
                    let mut dx = g.clone();
                    for v in dx.data_mut() {
                        *v *= sv;
                    }
                    add_grad(&mut grads[x.0], &dx);
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, xv)| gv * xv)
                        .sum();
                    add_grad(&mut grads[s.0], &Tensor::scalar(ds));
                }
                Op::ElemMul(a, b) => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let mut da = g.clone();
                    for (v, x) in da.data_mut().iter_mut().zip(bv.data()) {
                        *v *= x;
                    }
                    add_grad(&mut grads[a.0], &da);
                    let mut db = g;
                    for (v, x) in db.data_mut().iter_mut().zip(av.data()) {
                        *v *= x;
                    }
                    add_grad(&mut grads[b.0], &db);
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    let mut dx = g.clone();
                    for (v, t) in dx.data_mut().iter_mut().zip(y.data()) {
                        *v *= 1.0 - t * t;
                    }
                    add_grad(&mut grads[x.0], &dx);
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].value;
                    let mut dx = g.clone();
                    for (v, s) in dx.data_mut().iter_mut().zip(y.data()) {
                        *v *= s * (1.0 - s);
                    }
                    add_grad(&mut grads[x.0], &dx);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = g.clone();
                    for (v, inp) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if *inp <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    add_grad(&mut grads[x.0], &dx);
                }
                Op::Exp(x) => {
                    let y = &self.nodes[i].value;
                    let mut dx = g.clone();
                    for (v, e) in dx.data_mut().iter_mut().zip(y.data()) {
                        *v *= e;
                    }
                    add_grad(&mut grads[x.0], &dx);
                }
                Op::SoftmaxRows { x, mask } => {
                    let y = &self.nodes[i].value;
                    let (r, c) = y.shape();
                    let mut dx = Tensor::zeros(r, c);
                    for row in 0..r {
                        let keep = |j: usize| mask.as_ref().map_or(true, |m| m[row * c + j]);
                        let mut dot = 0.0;
                        for j in 0..c {
                            if keep(j) {
                                dot += g.at(row, j) * y.at(row, j);
                            }
                        }
                        for j in 0..c {
                            if keep(j) {
                                dx.set(row, j, y.at(row, j) * (g.at(row, j) - dot));
                            }
                        }
                    }
                    add_grad(&mut grads[x.0], &dx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gain.0].value;
                    let (r, d) = xv.shape();
                    let mut dx = Tensor::zeros(r, d);
                    let mut dgain = Tensor::zeros(1, d);
                    let mut dbias = Tensor::zeros(1, d);
                    for row in 0..r {
                        let xr = xv.row(row);
                        let (mean, var) = mean_var(xr);
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                        // d gain, d bias
                        for j in 0..d {
                            dgain.data_mut()[j] += g.at(row, j) * xhat[j];
                            dbias.data_mut()[j] += g.at(row, j);
                        }
                        // d x: standard layer-norm backward
                        let dxhat: Vec<f64> =
                            (0..d).map(|j| g.at(row, j) * gv.at(0, j)).collect();
                        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat: f64 = dxhat
                            .iter()
                            .zip(xhat.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            dx.set(
                                row,
                                j,
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat),
                            );
                        }
                    }
                    add_grad(&mut grads[x.0], &dx);
                    add_grad(&mut grads[gain.0], &dgain);
                    add_grad(&mut grads[bias.0], &dbias);
                }
                Op::Transpose(x) => {
                    let (r, c) = g.shape();
                    let mut dx = Tensor::zeros(c, r);
                    for i2 in 0..r {
                        for j2 in 0..c {
                            dx.set(j2, i2, g.at(i2, j2));
                        }
                    }
                    add_grad(&mut grads[x.0], &dx);
                }
                Op::SumRows(x) => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        dx.row_mut(r).copy_from_slice(g.row(0));
                    }
                    add_grad(&mut grads[x.0], &dx);
                }
                Op::SumAll(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = Tensor::filled(xv.rows(), xv.cols(), g.item());
                    add_grad(&mut grads[x.0], &dx);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.nodes[a.0].value.cols();
                    let bc = self.nodes[b.0].value.cols();
                    let rows = g.rows();
                    let mut da = Tensor::zeros(rows, ac);
                    let mut db = Tensor::zeros(rows, bc);
                    for r in 0..rows {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    add_grad(&mut grads[a.0], &da);
                    add_grad(&mut grads[b.0], &db);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let pv = &self.nodes[p.0].value;
                        let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            dp.row_mut(r).copy_from_slice(g.row(at + r));
                        }
                        at += pv.rows();
                        add_grad(&mut grads[p.0], &dp);
                    }
                }
                Op::NegLogSoftmaxFirst(x) => {
                    let xv = &self.nodes[x.0].value;
                    let n = xv.cols();
                    let mut sm = vec![0.0; n];
                    softmax_row_into(xv.row(0), None, &mut sm);
                    let gv = g.item();
                    let mut dx = Tensor::zeros(1, n);
                    for j in 0..n {
                        let delta = if j == 0 { 1.0 } else { 0.0 };
                        dx.set(0, j, gv * (sm[j] - delta));
                    }
                    add_grad(&mut grads[x.0], &dx);
                }
            }
        }
        Ok(sink)
    }
}

fn add_grad(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => {
            for (o, v) in t.data_mut().iter_mut().zip(g.data()) {
                *o += v;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, var)
}

fn softmax_row_into(logits: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in logits.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        // every position masked
        for o in out.iter_mut() {
            *o = 0.0;
        }
        return;
    }
    let mut sum = 0.0;
    for (j, &v) in logits.iter().enumerate() {
        if keep(j) {
            let e = (v - max).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `out += A . B`, with optional transposition of either operand.
fn matmul_into(a: &Tensor, b: &Tensor, out: &mut Tensor, trans_a: bool, trans_b: bool) {
    let (m, k) = if trans_a {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let n = if trans_b { b.rows() } else { b.cols() };
    debug_assert_eq!(out.shape(), (m, n));
    let get_a = |i: usize, l: usize| if trans_a { a.at(l, i) } else { a.at(i, l) };
    for i in 0..m {
        let out_row = out.row_mut(i);
        for l in 0..k {
            let av = get_a(i, l);
            if av == 0.0 {
                continue;
            }
            if trans_b {
                for (j, o) in out_row.iter_mut().enumerate() {
                    *o += av * b.at(j, l);
                }
            } else {
                let brow = b.row(l);
                for (o, bv) in out_row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn softmax_symmetry() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::row_vector(vec![0.0, 0.0]));
        let y = g.softmax_rows(x, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_full_masking() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::row_vector(vec![3.7, -1.2]));
        let y = g.softmax_rows(x, Some(&[true, false])).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_all_masked_row_is_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::row_vector(vec![1.0, 2.0]));
        let y = g.softmax_rows(x, Some(&[false, false])).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let store = ParamStore::new();
        for _ in 0..20 {
            let mut g = Graph::new(&store);
            let rows = rng.gen_range(1..5);
            let cols = rng.gen_range(2..7);
            let x = g.input(rand_tensor(&mut rng, rows, cols));
            let mask: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.7)).collect();
            let y = g.softmax_rows(x, Some(&mask)).unwrap();
            let yv = g.value(y);
            for r in 0..rows {
                let kept: Vec<f64> = (0..cols)
                    .filter(|&j| mask[r * cols + j])
                    .map(|j| yv.at(r, j))
                    .collect();
                if kept.is_empty() {
                    assert!(yv.row(r).iter().all(|&v| v == 0.0));
                } else {
                    let s: f64 = kept.iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                    assert!(kept.iter().all(|&v| v > 0.0 && v <= 1.0));
                }
                for j in 0..cols {
                    if !mask[r * cols + j] {
                        assert_eq!(yv.at(r, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::filled(1, 4, 3.25));
        let gain = g.input(Tensor::filled(1, 4, 1.0));
        let bias = g.input(Tensor::zeros(1, 4));
        let y = g.layer_norm(x, gain, bias).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-9, "constant row should normalize to zero, got {}", v);
        }
    }

    #[test]
    fn tanh_gradient_analytic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = store.add("x", rand_tensor(&mut rng, 2, 3), true);
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let t = g.tanh(xv).unwrap();
        let loss = g.sum_all(t).unwrap();
        let grads = g.backward(loss).unwrap();
        let got = grads.get(x).unwrap();
        for (gv, xv) in got.data().iter().zip(store.value(x).data()) {
            let expect = 1.0 - xv.tanh().powi(2);
            assert!((gv - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(vec![1.5, -2.0, 0.5]), true);
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let y = g.input(Tensor::from_vec(3, 1, vec![2.0, 3.0, -1.0]));
        let prod = g.matmul(xv, y).unwrap();
        let grads = g.backward(prod).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 3.0, -1.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(4.0), true);
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let sum = g.add(xv, xv).unwrap();
        let grads = g.backward(sum).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn repeated_param_use_is_single_node() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0), true);
        let mut g = Graph::new(&store);
        let a = g.param(x);
        let b = g.param(x);
        assert_eq!(a, b);
    }

    #[test]
    fn gather_accumulates_duplicate_ids() {
        let mut store = ParamStore::new();
        let table = store.add("table", Tensor::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]), true);
        let mut g = Graph::new(&store);
        let rows = g.gather_rows(table, &[1, 1, 2]).unwrap();
        let loss = g.sum_all(rows).unwrap();
        let grads = g.backward(loss).unwrap();
        let gt = grads.get(table).unwrap();
        assert_eq!(gt.row(0), &[0.0, 0.0]);
        assert_eq!(gt.row(1), &[2.0, 2.0]);
        assert_eq!(gt.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(2, 3));
        let b = g.input(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{}", msg);
        assert!(msg.contains("2x3"), "{}", msg);
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::scalar(1e308));
        let err = g.exp(a).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { .. }));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(2, 2));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn forward_recomputation_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, 4, 4), true);
        let x = rand_tensor(&mut rng, 3, 4);
        let run = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let xv = g.input(x.clone());
            let wv = g.param(w);
            let h = g.matmul(xv, wv).unwrap();
            let t = g.tanh(h).unwrap();
            let s = g.softmax_rows(t, None).unwrap();
            g.detach(s)
        };
        let a = run(&store);
        let b = run(&store);
        assert_eq!(a, b);
    }

    // Central finite differences over every primitive, 10 random points each.
    #[test]
    fn primitives_match_finite_differences() {
        use crate::gradcheck::check_param_gradients;
        let mut rng = ChaCha8Rng::seed_from_u64(41);

        type BuildFn = Box<
            dyn Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
        >;
        let cases: Vec<(&str, usize, usize, BuildFn)> = vec![
            ("matmul", 3, 4, Box::new(|g, x| {
                let w = g.input(Tensor::from_vec(4, 2, (0..8).map(|i| 0.3 * i as f64 - 1.0).collect()));
                let y = g.matmul(x, w)?;
                g.sum_all(y)
            })),
            ("add", 2, 3, Box::new(|g, x| {
                let y = g.add(x, x)?;
                let z = g.elem_mul(y, x)?;
                g.sum_all(z)
            })),
            ("add_row", 2, 3, Box::new(|g, x| {
                let b = g.input(Tensor::row_vector(vec![0.5, -0.25, 1.0]));
                let y = g.add_row(x, b)?;
                let z = g.elem_mul(y, y)?;
                g.sum_all(z)
            })),
            ("scalar_mul", 2, 2, Box::new(|g, x| {
                let y = g.scalar_mul(x, -1.7)?;
                let z = g.elem_mul(y, y)?;
                g.sum_all(z)
            })),
            ("tanh", 2, 3, Box::new(|g, x| {
                let y = g.tanh(x)?;
                g.sum_all(y)
            })),
            ("sigmoid", 2, 3, Box::new(|g, x| {
                let y = g.sigmoid(x)?;
                g.sum_all(y)
            })),
            ("exp", 2, 2, Box::new(|g, x| {
                let y = g.exp(x)?;
                g.sum_all(y)
            })),
            ("softmax_rows", 2, 4, Box::new(|g, x| {
                let m = vec![true, true, false, true, true, true, true, false];
                let y = g.softmax_rows(x, Some(&m))?;
                let w = g.input(Tensor::from_vec(2, 4, (0..8).map(|i| (i as f64) * 0.37 - 1.0).collect()));
                let z = g.elem_mul(y, w)?;
                g.sum_all(z)
            })),
            ("layer_norm", 2, 4, Box::new(|g, x| {
                let gain = g.input(Tensor::row_vector(vec![1.1, 0.9, 1.0, 1.3]));
                let bias = g.input(Tensor::row_vector(vec![0.1, -0.2, 0.0, 0.4]));
                let y = g.layer_norm(x, gain, bias)?;
                let w = g.input(Tensor::from_vec(2, 4, (0..8).map(|i| (i as f64) * 0.21 - 0.7).collect()));
                let z = g.elem_mul(y, w)?;
                g.sum_all(z)
            })),
            ("transpose", 2, 3, Box::new(|g, x| {
                let y = g.transpose(x)?;
                let w = g.input(Tensor::from_vec(3, 2, (0..6).map(|i| (i as f64) * 0.5 - 1.2).collect()));
                let z = g.elem_mul(y, w)?;
                g.sum_all(z)
            })),
            ("sum_rows", 3, 3, Box::new(|g, x| {
                let y = g.sum_rows(x)?;
                let z = g.elem_mul(y, y)?;
                g.sum_all(z)
            })),
            ("concat_cols", 2, 2, Box::new(|g, x| {
                let y = g.concat_cols(x, x)?;
                let w = g.input(Tensor::from_vec(2, 4, (0..8).map(|i| (i as f64) * 0.11 - 0.3).collect()));
                let z = g.elem_mul(y, w)?;
                g.sum_all(z)
            })),
            ("concat_rows", 2, 3, Box::new(|g, x| {
                let y = g.concat_rows(&[x, x])?;
                let w = g.input(Tensor::from_vec(4, 3, (0..12).map(|i| (i as f64) * 0.13 - 0.5).collect()));
                let z = g.elem_mul(y, w)?;
                g.sum_all(z)
            })),
            ("scale_by", 1, 1, Box::new(|g, s| {
                let x = g.input(Tensor::row_vector(vec![0.7, -1.3, 0.2]));
                let y = g.scale_by(x, s)?;
                let z = g.elem_mul(y, y)?;
                g.sum_all(z)
            })),
            ("neg_log_softmax_first", 1, 5, Box::new(|g, x| {
                g.neg_log_softmax_first(x)
            })),
            ("relu", 2, 3, Box::new(|g, x| {
                // keep points away from the kink at zero
                let y = g.relu(x)?;
                let z = g.elem_mul(y, y)?;
                g.sum_all(z)
            })),
        ];

        for (name, r, c, build) in &cases {
            for trial in 0..10 {
                let mut point = rand_tensor(&mut rng, *r, *c);
                if *name == "relu" {
                    for v in point.data_mut() {
                        if v.abs() < 0.05 {
                            *v += 0.1_f64.copysign(*v + 0.01);
                        }
                    }
                }
                let mut store = ParamStore::new();
                let id = store.add("x", point, true);
                let report = check_param_gradients(
                    &mut store,
                    &|g| {
                        let x = g.param(id);
                        build(g, x)
                    },
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(
                    report.passed(),
                    "{} trial {}: max rel err {:.3e} at {}",
                    name,
                    trial,
                    report.max_rel_err,
                    report.worst_coordinate
                );
            }
        }
    }
}
