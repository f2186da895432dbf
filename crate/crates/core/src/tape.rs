//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward pass needs. Nodes only ever reference earlier nodes, so walking
//! the tape backwards is a valid topological order. A tape supports exactly
//! one `backward`; a second call is rejected.

use crate::error::{Error, Result};
use crate::loss::KlVariant;
use crate::tensor::{log_softmax, matmul_at_into, matmul_bt_into, matmul_into, softmax_in_place, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddRow,
    Scale,
    ConcatRows,
    SliceRows,
    ConcatCols,
    SliceCols,
    EmbeddingLookup,
    RowSoftmax,
    LayerNorm,
    Gelu,
    RopeRotate,
    Transpose,
    Sum,
    CrossEntropy,
    KlDivergence,
    SortedProbL1,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Embedding(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Rope {
        x: Var,
        positions: Vec<usize>,
        head_dim: usize,
        base: f64,
    },
    Transpose(Var),
    Sum(Var),
    /// Loss ops keep d(loss)/d(input) for their single differentiable input.
    Loss {
        kind: OpKind,
        input: Var,
        grad: Tensor,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::Embedding(..) => OpKind::EmbeddingLookup,
            Op::Softmax(..) => OpKind::RowSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Rope { .. } => OpKind::RopeRotate,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Sum(..) => OpKind::Sum,
            Op::Loss { kind, .. } => *kind,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// One entry of the recorded operation sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub kind: OpKind,
    pub shape: Vec<usize>,
    pub label: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of `shape` when the loss does not reach it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

/// Rotates every head block of a row in place; `sign = -1` applies the inverse.
fn rope_rows(data: &mut [f64], cols: usize, positions: &[usize], head_dim: usize, base: f64, sign: f64) {
    let half = head_dim / 2;
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut data[r * cols..(r + 1) * cols];
        for head in row.chunks_mut(head_dim) {
            for i in 0..half {
                let theta = pos as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                let (s, c) = (sign * theta).sin_cos();
                let (a, b) = (head[i], head[i + half]);
                head[i] = a * c - b * s;
                head[i + half] = a * s + b * c;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// The sequence of recorded operations, leaf labels included.
    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes
            .iter()
            .map(|n| TraceEntry {
                kind: n.op.kind(),
                shape: n.value.shape().to_vec(),
                label: n.label.clone(),
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(Error::contract("tape already consumed by backward"));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf (trainable parameter).
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "leaf")
    }

    /// A leaf carrying a name in the operation trace.
    pub fn leaf_named(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf, trainable, "leaf")?;
        self.nodes[v.0].label = Some(name.to_string());
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", av)?;
        let (k2, n) = require_matrix("matmul", bv)?;
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg, "add")
    }

    /// Adds a `1×c` (or length-`c`) row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let (r, c) = require_matrix("add_row", xv)?;
        if rv.numel() != c {
            return Err(mismatch("add_row", xv, rv));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, b) in chunk.iter_mut().zip(rv.data()) {
                *d += b;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(Tensor::matrix(r, c, data), Op::AddRow(x, row), rg, "add_row")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg, "scale")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows needs at least one input"))?;
        let c = require_matrix("concat_rows", self.value(*first))?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            let (r, pc) = require_matrix("concat_rows", pv)?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(*first), pv));
            }
            data.extend_from_slice(pv.data());
            rows += r;
        }
        let rg = self.rg(parts);
        self.push(Tensor::matrix(rows, c, data), Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, _) = require_matrix("slice_rows", xv)?;
        if start > end || end > r {
            return Err(Error::contract(format!(
                "slice_rows {start}..{end} out of range for {} rows",
                r
            )));
        }
        let value = xv.slice_rows(start, end);
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceRows(x, start), rg, "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one input"))?;
        let r = require_matrix("concat_cols", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (pr, pc) = require_matrix("concat_cols", pv)?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(*first), pv));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::matrix(r, c, data), Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = require_matrix("slice_cols", xv)?;
        if start > end || end > c {
            return Err(Error::contract(format!(
                "slice_cols {start}..{end} out of range for {c} columns"
            )));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..end]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, end - start, data), Op::SliceCols(x, start), rg, "slice_cols")
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, c) = require_matrix("embedding_lookup", tv)?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::contract(format!(
                    "embedding id {id} out of range for vocabulary {v}"
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::matrix(ids.len(), c, data),
            Op::Embedding(table, ids.to_vec()),
            rg,
            "embedding_lookup",
        )
    }

    /// Row softmax. With `causal`, entry `(i, j)` for `j > i` is excluded.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = require_matrix("row_softmax", xv)?;
        let mut data = xv.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            if causal {
                let keep = (i + 1).min(c);
                softmax_in_place(&mut row[..keep]);
                row[keep..].iter_mut().for_each(|v| *v = 0.0);
            } else {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, data), Op::Softmax(x), rg, "row_softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = require_matrix("layer_norm", xv)?;
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != c {
            return Err(mismatch("layer_norm", xv, gv));
        }
        if bv.numel() != c {
            return Err(mismatch("layer_norm", xv, bv));
        }
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            Tensor::matrix(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| gelu(v).0);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg, "gelu")
    }

    /// Rotary position embedding applied independently to every `head_dim`
    /// block of each row, using the half-split pairing `(i, i + head_dim/2)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, base: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = require_matrix("rope_rotate", xv)?;
        if positions.len() != r || head_dim == 0 || head_dim % 2 != 0 || c % head_dim != 0 {
            return Err(Error::contract(format!(
                "rope_rotate: {} positions, head_dim {head_dim}, input {:?}",
                positions.len(),
                xv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        rope_rows(&mut data, c, positions, head_dim, base, 1.0);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::matrix(r, c, data),
            Op::Rope {
                x,
                positions: positions.to_vec(),
                head_dim,
                base,
            },
            rg,
            "rope_rotate",
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        require_matrix("transpose", xv)?;
        let value = xv.transpose();
        let rg = self.rg(&[x]);
        self.push(value, Op::Transpose(x), rg, "transpose")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg, "sum")
    }

    /// Mean over masked-in rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (t, v) = require_matrix("cross_entropy", lv)?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::contract(format!(
                "cross_entropy: {t} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy: mask selects no positions"));
        }
        let mut loss = 0.0;
        let mut grad = vec![0.0; t * v];
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let target = targets[i];
            if target >= v {
                return Err(Error::contract(format!(
                    "cross_entropy: target {target} out of range for {v} classes"
                )));
            }
            let lp = log_softmax(lv.row(i));
            loss -= lp[target];
            let g = &mut grad[i * v..(i + 1) * v];
            for (gj, l) in g.iter_mut().zip(&lp) {
                *gj = l.exp() / count as f64;
            }
            g[target] -= 1.0 / count as f64;
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss / count as f64),
            Op::Loss {
                kind: OpKind::CrossEntropy,
                input: logits,
                grad: Tensor::matrix(t, v, grad),
            },
            rg,
            "cross_entropy",
        )
    }

    /// Mean over masked-in rows of a divergence between the row softmaxes of
    /// `reference` (detached) and `candidate`.
    pub fn kl_divergence(
        &mut self,
        reference: Var,
        candidate: Var,
        mask: &[bool],
        variant: KlVariant,
    ) -> Result<Var> {
        let (rv, cv) = (self.value(reference), self.value(candidate));
        if rv.shape() != cv.shape() {
            return Err(mismatch("kl_divergence", rv, cv));
        }
        let (t, v) = require_matrix("kl_divergence", rv)?;
        if mask.len() != t {
            return Err(Error::contract(format!(
                "kl_divergence: {t} rows but {} mask entries",
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::contract("kl_divergence: mask selects no positions"));
        }
        let scale = 1.0 / count as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; t * v];
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let (row_loss, row_grad) = kl_row(rv.row(i), cv.row(i), variant);
            loss += row_loss;
            for (g, d) in grad[i * v..(i + 1) * v].iter_mut().zip(row_grad) {
                *g = d * scale;
            }
        }
        let rg = self.rg(&[candidate]);
        self.push(
            Tensor::scalar(loss * scale),
            Op::Loss {
                kind: OpKind::KlDivergence,
                input: candidate,
                grad: Tensor::matrix(t, v, grad),
            },
            rg,
            "kl_divergence",
        )
    }

    /// Mean over the first `min(rows)` positions of the L1 distance between
    /// descending-sorted probability vectors, the narrower one zero-padded.
    /// `reference` is detached.
    pub fn sorted_prob_l1(&mut self, reference: Var, candidate: Var) -> Result<Var> {
        let (rv, cv) = (self.value(reference), self.value(candidate));
        let (tr, vr) = require_matrix("sorted_prob_l1", rv)?;
        let (tc, vc) = require_matrix("sorted_prob_l1", cv)?;
        let n = tr.min(tc);
        if n == 0 {
            return Err(Error::contract("sorted_prob_l1: no aligned positions"));
        }
        let width = vr.max(vc);
        let mut loss = 0.0;
        let mut grad = vec![0.0; tc * vc];
        // Softmax is taken over the already-sorted logits so the result does
        // not depend on how either vocabulary is indexed.
        for i in 0..n {
            let mut p = rv.row(i).to_vec();
            p.sort_by(|a, b| b.total_cmp(a));
            softmax_in_place(&mut p);
            p.resize(width, 0.0);

            let row = cv.row(i);
            let mut order: Vec<usize> = (0..vc).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut sorted: Vec<f64> = order.iter().map(|&k| row[k]).collect();
            softmax_in_place(&mut sorted);
            let mut q = vec![0.0; vc];
            for (rank, &k) in order.iter().enumerate() {
                q[k] = sorted[rank];
            }

            // d(row loss)/d(q_k) before the softmax Jacobian.
            let mut dq = vec![0.0; vc];
            for (rank, &k) in order.iter().enumerate() {
                let diff = q[k] - p[rank];
                loss += diff.abs();
                dq[k] = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
            loss += p[vc..].iter().sum::<f64>();

            let inner: f64 = q.iter().zip(&dq).map(|(a, b)| a * b).sum();
            for k in 0..vc {
                grad[i * vc + k] = q[k] * (dq[k] - inner) / n as f64;
            }
        }
        let rg = self.rg(&[candidate]);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::Loss {
                kind: OpKind::SortedProbL1,
                input: candidate,
                grad: Tensor::matrix(tc, vc, grad),
            },
            rg,
            "sorted_prob_l1",
        )
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::contract("backward called twice on the same tape"));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let seed = Tensor::full(lv.shape(), 1.0);
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(g) => g.axpy(1.0, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_into(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_into(av.data(), g.data(), &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*row) {
                    let c = g.cols();
                    let mut dr = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, dr).expect("row shape"));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.slice_rows(offset, offset + r));
                    }
                    offset += r;
                }
                debug_assert_eq!(offset * c, g.numel());
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                let c = xv.cols();
                d.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let (r, c) = (g.rows(), g.cols());
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * c + offset..i * c + offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::matrix(r, w, d));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let w = g.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, Tensor::matrix(r, c, d));
            }
            Op::Embedding(table, ids) => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut d = Tensor::zeros(tv.shape());
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut d.data_mut()[id * c..(id + 1) * c];
                    for (a, b) in dst.iter_mut().zip(g.row(i)) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.numel()];
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(y.rows(), c, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let (r, c) = (g.rows(), g.cols());
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = g.row(i);
                        let xh = &xhat[i * c..(i + 1) * c];
                        let dy: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dy = dy.iter().sum::<f64>() / c as f64;
                        let mean_dy_xh = dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = inv_std[i] * (dy[j] - mean_dy - xh[j] * mean_dy_xh);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::matrix(r, c, dx));
                }
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g.data()[i * c + j] * xhat[i * c + j];
                        }
                    }
                    let shape = self.value(*gain).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(shape, dg).expect("gain shape"));
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, db).expect("bias shape"));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gelu(v).1 * gv)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data).expect("gelu shape"));
            }
            Op::Rope {
                x,
                positions,
                head_dim,
                base,
            } => {
                let mut d = g.data().to_vec();
                rope_rows(&mut d, g.cols(), positions, *head_dim, *base, -1.0);
                self.accumulate(grads, *x, Tensor::matrix(g.rows(), g.cols(), d));
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Loss { input, grad, .. } => {
                self.accumulate(grads, *input, grad.map(|v| v * g.item()));
            }
        }
    }
}

/// Row divergence and its gradient with respect to the candidate logits.
fn kl_row(reference: &[f64], candidate: &[f64], variant: KlVariant) -> (f64, Vec<f64>) {
    let lp = log_softmax(reference);
    let lq = log_softmax(candidate);
    let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
    match variant {
        KlVariant::Forward => {
            let loss = p.iter().zip(lp.iter().zip(&lq)).map(|(pi, (a, b))| pi * (a - b)).sum();
            let grad = q.iter().zip(&p).map(|(qi, pi)| qi - pi).collect();
            (loss, grad)
        }
        KlVariant::Reverse => {
            let terms: Vec<f64> = lq.iter().zip(&lp).map(|(a, b)| a - b).collect();
            let loss: f64 = q.iter().zip(&terms).map(|(qi, t)| qi * t).sum();
            let grad = q.iter().zip(&terms).map(|(qi, t)| qi * (t - loss)).collect();
            (loss, grad)
        }
        KlVariant::Skewed(lambda) => {
            let m: Vec<f64> = p.iter().zip(&q).map(|(pi, qi)| lambda * pi + (1.0 - lambda) * qi).collect();
            let loss = p
                .iter()
                .zip(lp.iter().zip(&m))
                .filter(|(pi, _)| **pi > 0.0)
                .map(|(pi, (lpi, mi))| pi * (lpi - mi.ln()))
                .sum();
            let ratio: Vec<f64> = p.iter().zip(&m).map(|(pi, mi)| pi / mi).collect();
            let inner: f64 = ratio.iter().zip(&q).map(|(r, qi)| r * qi).sum();
            let grad = q
                .iter()
                .zip(&ratio)
                .map(|(qi, r)| -(1.0 - lambda) * qi * (r - inner))
                .collect();
            (loss, grad)
        }
    }
}
