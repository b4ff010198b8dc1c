//! Define-by-run reverse-mode autodiff over 2-D tensors.
//!
//! A [`Graph`] is rebuilt for every step. Nodes are appended in evaluation
//! order, so reverse insertion order is a valid reverse topological order and
//! the backward sweep is a single pass.

use std::collections::HashMap;

use super::params::{Grads, ParamStore};
use super::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::ctc;
use crate::error::{Error, Result};
use crate::model::loss::focal_from_log_prob;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    MeanRows(Var),
    Sum(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    BroadcastRows(Var),
    GatherRow(Var, usize),
    ContextStack(Var, usize),
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Grl(Var, f64),
    Ctc {
        lp: Var,
        grad: Vec<f64>,
    },
    ClassLoss {
        lp: Var,
        label: usize,
        dlp: f64,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::GatherRow(..) => "gather_row",
            Op::ContextStack(..) => "context_stack",
            Op::MaxPoolRows { .. } => "max_pool_rows",
            Op::Grl(..) => "gradient_reversal",
            Op::Ctc { .. } => "ctc_loss",
            Op::ClassLoss { .. } => "class_loss",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph bound to a parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
    clamp_events: usize,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("shape computed from inputs")
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            clamp_events: 0,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
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

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    /// Number of class-loss evaluations whose target probability was clamped.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "output of `{}` (node {})",
                op.tag(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::Dimension(format!(
                "{what} expects a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok(dims(t))
    }

    /// Constant leaf; never receives gradients.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, false)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let slot = self
            .params
            .slot(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter `{name}`")))?;
        if let Some(&v) = self.param_vars.get(&slot) {
            return Ok(v);
        }
        let value = self.params.by_slot(slot).clone();
        let v = self.push(value, Op::Param(slot), true)?;
        self.param_vars.insert(slot, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_matrix(a, "matmul")?;
        let (k2, n) = self.check_matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dims differ: {m}×{k} · {k2}×{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(mat(m, n, out), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_matrix(a, "matmul_nt")?;
        let (n, k2) = self.check_matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner dims differ: {m}×{k} · ({n}×{k2})ᵀ"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(mat(m, n, out), Op::MatMulNt(a, b), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "add_row")?;
        if self.value(row).shape() != [1, n] {
            return Err(Error::Dimension(format!(
                "add_row: expected 1×{n} row, got {:?}",
                self.value(row).shape()
            )));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, &b) in chunk.iter_mut().zip(r) {
                *d += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(mat(m, n, data), Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Row-wise layer normalisation with learned 1×n gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.check_matrix(x, "layer_norm")?;
        for p in [gain, bias] {
            if self.value(p).shape() != [1, n] {
                return Err(Error::Dimension(format!(
                    "layer_norm: gain/bias must be 1×{n}, got {:?}",
                    self.value(p).shape()
                )));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let z = (row[c] - mean) * is;
                normed[r * n + c] = z;
                out[r * n + c] = z * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            mat(m, n, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        )
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "softmax")?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(a);
        self.push(mat(m, n, data), Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "log_softmax")?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(mat(m, n, data), Op::LogSoftmax(a), rg)
    }

    /// Mean over the leading axis: m×n → 1×n.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "mean_rows")?;
        if m == 0 {
            return Err(Error::Dimension("mean_rows over zero rows".into()));
        }
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(a);
        self.push(mat(1, n, out), Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Concatenates along the last axis: [m×p] ++ [m×q] → [m×(p+q)].
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.check_matrix(a, "concat")?;
        let (m2, q) = self.check_matrix(b, "concat")?;
        if m != m2 {
            return Err(Error::Dimension(format!(
                "concat: leading dims differ ({m} vs {m2})"
            )));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&x[r * p..(r + 1) * p]);
            out.extend_from_slice(&y[r * q..(r + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(mat(m, p + q, out), Op::ConcatCols(a, b), rg)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{end} out of range for width {n}"
            )));
        }
        let x = self.value(a).data();
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&x[r * n + start..r * n + end]);
        }
        let rg = self.rg(a);
        self.push(mat(m, w, out), Op::SliceCols(a, start), rg)
    }

    /// Repeats a 1×n row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (m, n) = self.check_matrix(a, "broadcast_rows")?;
        if m != 1 {
            return Err(Error::Dimension(format!(
                "broadcast_rows expects a 1×n row, got {m}×{n}"
            )));
        }
        let row = self.value(a).data();
        let out = row.repeat(rows);
        let rg = self.rg(a);
        self.push(mat(rows, n, out), Op::BroadcastRows(a), rg)
    }

    /// Row `index` of an N×D table as a 1×D row.
    pub fn gather_row(&mut self, table: Var, index: usize) -> Result<Var> {
        let (m, n) = self.check_matrix(table, "gather_row")?;
        if index >= m {
            return Err(Error::Lookup(index));
        }
        let row = self.value(table).row_slice(index).to_vec();
        let rg = self.rg(table);
        self.push(mat(1, n, row), Op::GatherRow(table, index), rg)
    }

    /// Stacks each row with its `width` temporal neighbours (zero padded,
    /// centred): [T×C] → [T×(width·C)]. Feeding the result into a matmul is a
    /// 1-D convolution over time.
    pub fn context_stack(&mut self, a: Var, width: usize) -> Result<Var> {
        let (t, c) = self.check_matrix(a, "context_stack")?;
        if width == 0 || width % 2 == 0 {
            return Err(Error::Dimension(format!(
                "context width must be odd and positive, got {width}"
            )));
        }
        let half = (width / 2) as isize;
        let x = self.value(a).data();
        let mut out = vec![0.0; t * width * c];
        for r in 0..t {
            for k in 0..width {
                let src = r as isize + k as isize - half;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let dst = r * width * c + k * c;
                out[dst..dst + c].copy_from_slice(&x[src * c..(src + 1) * c]);
            }
        }
        let rg = self.rg(a);
        self.push(mat(t, width * c, out), Op::ContextStack(a, width), rg)
    }

    /// Non-overlapping max pooling over pairs of rows: [T×C] → [⌊T/2⌋×C].
    pub fn max_pool_rows(&mut self, a: Var) -> Result<Var> {
        let (t, c) = self.check_matrix(a, "max_pool_rows")?;
        let out_t = t / 2;
        if out_t == 0 {
            return Err(Error::Dimension(format!(
                "max_pool_rows needs at least 2 rows, got {t}"
            )));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; out_t * c];
        let mut argmax = vec![0; out_t * c];
        for r in 0..out_t {
            for col in 0..c {
                let i0 = 2 * r * c + col;
                let i1 = i0 + c;
                let (v, i) = if x[i1] > x[i0] { (x[i1], i1) } else { (x[i0], i0) };
                out[r * c + col] = v;
                argmax[r * c + col] = i;
            }
        }
        let rg = self.rg(a);
        self.push(mat(out_t, c, out), Op::MaxPoolRows { x: a, argmax }, rg)
    }

    /// Gradient reversal: identity forward, gradient scaled by `coeff` backward.
    pub fn gradient_reversal(&mut self, a: Var, coeff: f64) -> Result<Var> {
        let t = self.value(a).clone();
        let rg = self.rg(a);
        self.push(t, Op::Grl(a, coeff), rg)
    }

    /// CTC negative log-likelihood of `tokens` under a T×V log-probability lattice.
    pub fn ctc_loss(&mut self, log_probs: Var, tokens: &[usize]) -> Result<Var> {
        let (t, v) = self.check_matrix(log_probs, "ctc_loss")?;
        let (loss, grad) = ctc::ctc_loss_raw(self.value(log_probs).data(), t, v, tokens)?;
        let rg = self.rg(log_probs);
        self.push(
            Tensor::scalar(loss),
            Op::Ctc {
                lp: log_probs,
                grad,
            },
            rg,
        )
    }

    /// Focal loss `−(1−p)^γ log p` on a 1×N log-probability row; γ = 0 is cross-entropy.
    pub fn class_loss(&mut self, log_probs: Var, label: usize, gamma: f64) -> Result<Var> {
        let (m, n) = self.check_matrix(log_probs, "class_loss")?;
        if m != 1 || label >= n {
            return Err(Error::Dimension(format!(
                "class_loss: label {label} for a {m}×{n} distribution"
            )));
        }
        let lp = self.value(log_probs).data()[label];
        let k = focal_from_log_prob(lp, gamma);
        if k.clamped {
            self.clamp_events += 1;
        }
        let rg = self.rg(log_probs);
        self.push(
            Tensor::scalar(k.loss),
            Op::ClassLoss {
                lp: log_probs,
                label,
                dlp: k.dloss_dlp,
            },
            rg,
        )
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let term = if w == 1.0 { v } else { self.scale(v, w)? };
            acc = Some(match acc {
                None => term,
                Some(a) => self.add(a, term)?,
            });
        }
        acc.ok_or_else(|| Error::Contract("weighted_sum of no terms".into()))
    }

    /// Mean of scalar nodes.
    pub fn mean_of(&mut self, terms: &[Var]) -> Result<Var> {
        let w = 1.0 / terms.len().max(1) as f64;
        let weighted: Vec<_> = terms.iter().map(|&v| (v, w)).collect();
        self.weighted_sum(&weighted)
    }

    /// Reverse sweep from a scalar root. Returns gradients per parameter slot.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        let mut out = Grads::new(self.params.len());

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Grads,
    ) {
        let nodes = &self.nodes;
        // Accumulates into the gradient buffer of `v`, creating it zeroed on first touch.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Input => {}
            Op::Param(slot) => {
                let shape = node.value.shape().to_vec();
                out.set(*slot, Tensor::new(shape, g).expect("grad shape"));
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims(val(*a));
                let n = val(*b).cols();
                acc(*a, &mut |buf| matmul_nt_acc(&g, val(*b).data(), buf, m, n, k));
                acc(*b, &mut |buf| matmul_tn_acc(val(*a).data(), &g, buf, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims(val(*a));
                let n = val(*b).rows();
                acc(*a, &mut |buf| matmul_acc(&g, val(*b).data(), buf, m, n, k));
                acc(*b, &mut |buf| matmul_tn_acc(&g, val(*a).data(), buf, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, &g));
                acc(*b, &mut |buf| add_into(buf, &g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, &g));
                acc(*b, &mut |buf| buf.iter_mut().zip(&g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| {
                    for ((d, gi), yi) in buf.iter_mut().zip(&g).zip(y) {
                        *d += gi * yi;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((d, gi), xi) in buf.iter_mut().zip(&g).zip(x) {
                        *d += gi * xi;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = val(*a).cols();
                acc(*a, &mut |buf| add_into(buf, &g));
                acc(*row, &mut |buf| {
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Scale(a, f) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(&g).for_each(|(d, s)| *d += s * f));
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, &mut |buf| {
                    for ((d, gi), xi) in buf.iter_mut().zip(&g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let (m, n) = dims(val(*x));
                let gv = val(*gain).data();
                acc(*x, &mut |buf| {
                    let mut dz = vec![0.0; n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let zr = &normed[r * n..(r + 1) * n];
                        for c in 0..n {
                            dz[c] = gr[c] * gv[c];
                        }
                        let mean_dz = dz.iter().sum::<f64>() / n as f64;
                        let mean_dzz = dot(&dz, zr) / n as f64;
                        for c in 0..n {
                            buf[r * n + c] += inv_std[r] * (dz[c] - mean_dz - zr[c] * mean_dzz);
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[c] += g[r * n + c] * normed[r * n + c];
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                acc(*a, &mut |buf| {
                    for ((br, gr), yr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s = dot(gr, yr);
                        for c in 0..n {
                            br[c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                acc(*a, &mut |buf| {
                    for ((br, gr), yr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s: f64 = gr.iter().sum();
                        for c in 0..n {
                            br[c] += gr[c] - yr[c].exp() * s;
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let (m, n) = dims(val(*a));
                let inv = 1.0 / m as f64;
                acc(*a, &mut |buf| {
                    for row in buf.chunks_mut(n) {
                        row.iter_mut().zip(&g).for_each(|(d, s)| *d += s * inv);
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += s));
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = dims(val(*a));
                let q = val(*b).cols();
                acc(*a, &mut |buf| {
                    for r in 0..m {
                        add_into(&mut buf[r * p..(r + 1) * p], &g[r * (p + q)..r * (p + q) + p]);
                    }
                });
                acc(*b, &mut |buf| {
                    for r in 0..m {
                        add_into(
                            &mut buf[r * q..(r + 1) * q],
                            &g[r * (p + q) + p..(r + 1) * (p + q)],
                        );
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let n = val(*a).cols();
                let w = node.value.cols();
                acc(*a, &mut |buf| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut buf[r * n + start..r * n + start + w], gr);
                    }
                });
            }
            Op::BroadcastRows(a) => {
                let n = node.value.cols();
                acc(*a, &mut |buf| {
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::GatherRow(table, index) => {
                let n = node.value.cols();
                acc(*table, &mut |buf| add_into(&mut buf[index * n..(index + 1) * n], &g));
            }
            Op::ContextStack(a, width) => {
                let (t, c) = dims(val(*a));
                let half = (*width / 2) as isize;
                acc(*a, &mut |buf| {
                    for r in 0..t {
                        for k in 0..*width {
                            let src = r as isize + k as isize - half;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            let from = r * width * c + k * c;
                            add_into(&mut buf[src * c..(src + 1) * c], &g[from..from + c]);
                        }
                    }
                });
            }
            Op::MaxPoolRows { x, argmax } => {
                acc(*x, &mut |buf| {
                    for (&i, gi) in argmax.iter().zip(&g) {
                        buf[i] += gi;
                    }
                });
            }
            Op::Grl(a, c) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(&g).for_each(|(d, s)| *d += s * c));
            }
            Op::Ctc { lp, grad } => {
                let s = g[0];
                acc(*lp, &mut |buf| {
                    buf.iter_mut().zip(grad).for_each(|(d, gr)| *d += s * gr)
                });
            }
            Op::ClassLoss { lp, label, dlp } => {
                let s = g[0];
                acc(*lp, &mut |buf| buf[*label] += s * dlp);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
