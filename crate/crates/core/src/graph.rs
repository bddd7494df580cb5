//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and the ids of its inputs. Because inputs always precede outputs,
//! the tape order is already topological and [`Graph::backward`] replays it
//! in reverse, visiting each node once. A fresh graph is built per step.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddN(Vec<Var>),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    LogSigmoid(Var),
    /// `scale · Σ_t mask_t · log softmax(logits_t)[target_t]`.
    PickLogSoftmax {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<f64>,
        scale: f64,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::AddN(..) => "add_n",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Embedding { .. } => "embedding",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::PickLogSoftmax { .. } => "pick_log_softmax",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::AddN(vs) | Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::SliceRows(x, _)
            | Op::SliceCols(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanRows(x)
            | Op::LogSigmoid(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::PickLogSoftmax { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One entry of the replayable computation record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordEntry {
    pub op: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Overflow-safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Adds a leaf. Gradients are only propagated to leaves flagged
    /// `requires_grad` and to the nodes that depend on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The ordered (operation, inputs, output) record of non-leaf nodes.
    pub fn record(&self) -> Vec<RecordEntry> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !matches!(n.op, Op::Leaf))
            .map(|(i, n)| RecordEntry {
                op: n.op.name(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let name = op.name();
        let value = value.check_finite(name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return dim_err(format!("matmul: {m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return dim_err(format!("matmul_nt: {m}x{k} · ({n}x{k2})ᵀ"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            false,
        );
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    /// Adds the vector `bias` (length `n`) to every row of `x: m×n`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.value(bias).numel() != n {
            return dim_err(format!(
                "add_row: bias of {} values for {n} columns",
                self.value(bias).numel()
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (v, bb) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *v += bb;
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(out, Op::AddRow(x, bias))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let Some(&first) = vars.first() else {
            return Err(Error::InvalidArgument("add_n of nothing".into()));
        };
        let mut data = self.value(first).data().to_vec();
        for &v in &vars[1..] {
            self.same_shape(first, v, "add_n")?;
            for (d, x) in data.iter_mut().zip(self.value(v).data()) {
                *d += x;
            }
        }
        let out = Tensor::new(self.value(first).shape().to_vec(), data)?;
        self.push(out, Op::AddN(vars.to_vec()))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.map_unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, gelu, Op::Gelu(x))
    }

    /// `log σ(x)`, evaluated as `−softplus(−x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| -softplus(-v), Op::LogSigmoid(x))
    }

    /// Per-row normalization with learned `gamma` and `beta` (length = cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return dim_err("layer_norm: scale/shift length must equal columns");
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(out, Op::Softmax(x))
    }

    /// Row-wise softmax where row `i` only sees columns `j <= i + offset`.
    ///
    /// Masked entries are exactly zero, so they contribute nothing to either
    /// the output or the gradient.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if m > n {
            return dim_err(format!("causal_softmax: {m} rows exceed {n} columns"));
        }
        let offset = n - m;
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let visible = r + offset + 1;
            softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|v| *v = 0.0);
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        // The masked backward is identical to plain softmax on the zeros.
        self.push(out, Op::Softmax(x))
    }

    /// Gathers rows of `table: V×d` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims(table)?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding of no ids".into()));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let out = Tensor::matrix(ids.len(), d, out)?;
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if start >= end || end > m {
            return dim_err(format!("slice_rows [{start},{end}) of {m} rows"));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        self.push(
            Tensor::matrix(end - start, n, data)?,
            Op::SliceRows(x, start),
        )
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if start >= end || end > n {
            return dim_err(format!("slice_cols [{start},{end}) of {n} columns"));
        }
        let xv = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&xv[r * n + start..r * n + end]);
        }
        self.push(Tensor::matrix(m, w, data)?, Op::SliceCols(x, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        }
        let n = self.dims(parts[0])?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, pn) = self.dims(p)?;
            if pn != n {
                return dim_err(format!("concat_rows: {pn} columns vs {n}"));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::matrix(rows, n, data)?,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let m = self.dims(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pm != m {
                return dim_err(format!("concat_cols: {pm} rows vs {m}"));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Tensor::matrix(m, total, data)?,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Column means of `x: m×n`, as a `1×n` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(&xv[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push(Tensor::matrix(1, n, out)?, Op::MeanRows(x))
    }

    /// Mean over positions with `mask == 1` of `−log softmax(logits)[target]`.
    /// An all-zero mask yields 0 with zero gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[f64],
    ) -> Result<Var> {
        let count: f64 = mask.iter().sum();
        let scale = if count > 0.0 { -1.0 / count } else { 0.0 };
        self.pick_log_softmax(logits, targets, mask, scale)
    }

    /// `Σ_t mask_t · log softmax(logits_t)[target_t]`.
    pub fn token_logprob_sum(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[f64],
    ) -> Result<Var> {
        self.pick_log_softmax(logits, targets, mask, 1.0)
    }

    fn pick_log_softmax(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[f64],
        scale: f64,
    ) -> Result<Var> {
        let (t, v) = self.dims(logits)?;
        if targets.len() != t || mask.len() != t {
            return dim_err(format!(
                "cross entropy: {t} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for r in 0..t {
            let row = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if mask[r] != 0.0 {
                total += row[targets[r]] - lse;
            }
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        self.push(
            Tensor::scalar(scale * total),
            Op::PickLogSoftmax {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                scale,
                probs,
            },
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return dim_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, bv, true, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, av, true, g, false, gb, true);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.0;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, bv, false, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(n, m, k, g, true, av, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let (m, n) = self.dims(*x)?;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for r in 0..m {
                        for c in 0..n {
                            gb[c] += g[r * n + c];
                        }
                    }
                }
            }
            Op::AddN(vs) => {
                for v in vs {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += f * b);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::LogSigmoid(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * sigmoid(-xv[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x)?;
                let gv = self.value(*gamma).data().to_vec();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for r in 0..m {
                        for c in 0..n {
                            gb[c] += g[r * n + c];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let (mut mean_d, mut mean_dx) = (0.0, 0.0);
                        for c in 0..n {
                            let d = g[r * n + c] * gv[c];
                            dxhat[c] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * n + c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            gx[r * n + c] +=
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let (m, n) = self.dims(*x)?;
                let y = out.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dot: f64 = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for i in row {
                            gx[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.dims(*table)?.1;
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let n = self.dims(*x)?.1;
                if let Some(gx) = self.acc(grads, *x) {
                    let off = start * n;
                    for (i, v) in g.iter().enumerate() {
                        gx[off + i] += v;
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.dims(*x)?;
                let w = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..m {
                        for c in 0..w {
                            gx[r * n + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(gp) = self.acc(grads, *p) {
                        for i in 0..len {
                            gp[i] += g[off + i];
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2()?;
                let mut col = 0;
                for p in parts {
                    let w = self.dims(*p)?.1;
                    if let Some(gp) = self.acc(grads, *p) {
                        for r in 0..m {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + col + c];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = self.dims(*x)?;
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c] / m as f64;
                        }
                    }
                }
            }
            Op::PickLogSoftmax {
                logits,
                targets,
                mask,
                scale,
                probs,
            } => {
                let (t, v) = self.dims(*logits)?;
                if let Some(gl) = self.acc(grads, *logits) {
                    for r in 0..t {
                        if mask[r] == 0.0 {
                            continue;
                        }
                        let coef = g[0] * scale;
                        for c in 0..v {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            gl[r * v + c] += coef * (onehot - probs[r * v + c]);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Result of [`Graph::backward`]: `dLoss/dNode` for every node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; all zeros when `v` is not reachable from the loss
    /// or does not require gradients.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape matches node"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Whether a gradient buffer was populated for `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_definition() {
        let mut g = Graph::new();
        let eye = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let prod = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(prod).data(), &[1.0, 2.0, 3.0, 4.0]);

        let col = g.constant(m(&[&[5.0], &[6.0]]));
        let out = g.matmul(a, col).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 1]);
        assert_eq!(g.value(out).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn log_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.0, -1000.0, 1.0]).unwrap());
        let y = g.log_sigmoid(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v[1] + 1000.0).abs() < 1e-9);
        // −ln(1 + e^{−1}) evaluated independently.
        let expected = -(1.0 + (-1.0f64).exp()).ln();
        assert!((v[2] - expected).abs() < 1e-15);
        assert!((v[2] + 0.313_262).abs() < 1e-6);
    }

    #[test]
    fn uniform_cross_entropy_is_ln_vocab() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(&[3, 16]));
        let ce = g
            .softmax_cross_entropy(logits, &[0, 5, 15], &[1.0, 1.0, 1.0])
            .unwrap();
        assert!((g.value(ce).item() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_zero_with_zero_gradient() {
        let mut g = Graph::new();
        let logits = g.param(
            Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.1, 1.0, 1.0, 0.0, -2.0]).unwrap(),
        );
        let ce = g
            .softmax_cross_entropy(logits, &[1, 2], &[0.0, 0.0])
            .unwrap();
        assert_eq!(g.value(ce).item(), 0.0);
        let grads = g.backward(ce).unwrap();
        assert!(grads.wrt(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[4], &[1.0]),
            Err(Error::TokenOutOfRange { id: 4, vocab: 4 })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones_and_zero_scale_is_zeros() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&v| v == 1.0));

        let z = g.scale(x, 0.0).unwrap();
        let s0 = g.sum(z).unwrap();
        let grads = g.backward(s0).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let y = g.param(Tensor::ones(&[3]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(!grads.reached(y));
        assert_eq!(grads.wrt(y), Tensor::zeros(&[3]));
    }

    #[test]
    fn record_is_topological() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2, 2]));
        let y = g.gelu(x).unwrap();
        let z = g.matmul(y, x).unwrap();
        let s = g.mean(z).unwrap();
        let rec = g.record();
        assert_eq!(rec.len(), 3);
        for e in &rec {
            assert!(e.inputs.iter().all(|i| i.id() < e.output.id()));
        }
        assert_eq!(rec.last().unwrap().output, s);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1], vec![1e300]).unwrap());
        let y = g.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3, 3], (0..9).map(|v| v as f64 * 0.1).collect()).unwrap());
        let y = g.causal_softmax(x).unwrap();
        let v = g.value(y);
        assert_eq!(v.at(0, 0), 1.0);
        assert_eq!(v.at(0, 1), 0.0);
        assert_eq!(v.at(1, 2), 0.0);
        assert!((v.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
