//! Wengert-list reverse-mode differentiation.
//!
//! Every op evaluates eagerly, stores its output on the tape, and records
//! what it needs for the reverse pass. `backward` walks the records in
//! exact reverse execution order. A tape is single-use: a second `backward`
//! is rejected and the caller must rebuild the graph on a fresh tape.

use super::kernels::{self, add_into};
use super::tensor::{axis_layout, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Stack(Vec<Var>),
    Sum(Var),
    Mean(Var),
    KlDiv {
        logq: Var,
        p: Tensor,
        rows: usize,
    },
    Nll {
        logp: Var,
        target: usize,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded values, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dim(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_bt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let out = kernels::matmul_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul_bt", Tensor::from_parts(vec![m, n], out), Op::MatMulBt(a, b), &[a, b])
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b])
    }

    /// Adds a vector to every row (last axis) of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap();
        if self.value(bias).numel() != n {
            return Err(Error::dim(format!(
                "add_row: bias of {} values for rows of {n}",
                self.value(bias).numel()
            )));
        }
        let bv = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("add_row", Tensor::from_parts(shape, out), Op::AddRow(a, bias), &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v * c);
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(kernels::gelu);
        self.push("gelu", t, Op::Gelu(a), &[a])
    }

    // ---- normalizations -------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = softmax_values(self.value(x), axis)?;
        self.push("softmax", y, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = log_softmax_values(self.value(x), axis)?;
        self.push("log_softmax", y, Op::LogSoftmax { x, axis }, &[x])
    }

    /// Normalizes every slice along `axis` to zero mean and unit variance,
    /// then applies the per-position `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xt = self.value(x);
        let (outer, n, inner) = axis_layout(xt.shape(), axis)?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::dim(format!("layer_norm affine params must have {n} values")));
        }
        let xs = xt.data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mean = (0..n).map(|j| xs[at(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (xs[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    let h = (xs[at(j)] - mean) * is;
                    xhat[at(j)] = h;
                    out[at(j)] = h * g[j] + b[j];
                }
                inv_std.push(is);
            }
        }
        let shape = xt.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    // ---- convolution ----------------------------------------------------

    /// Zero-padded 1-D cross-correlation along the last axis.
    ///
    /// `x` is `[C_in, L]` or `[C_in, R, L]` (R independent sequences sharing
    /// the kernels), `w` is `[C_out, C_in, k]` with odd `k`, `b` is `[C_out]`.
    /// The output keeps the input's length.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (cin, rows, len) = conv_input_dims(self.shape(x))?;
        let (cout, wcin, k) = match self.shape(w) {
            &[co, ci, k] => (co, ci, k),
            s => return Err(Error::dim(format!("conv1d kernels must be rank 3, got {s:?}"))),
        };
        if k % 2 == 0 {
            return Err(Error::config(format!("conv1d kernel width must be odd, got {k}")));
        }
        if wcin != cin {
            return Err(Error::dim(format!("conv1d expects {wcin} input channels, got {cin}")));
        }
        if self.value(b).numel() != cout {
            return Err(Error::dim(format!("conv1d bias must have {cout} values")));
        }
        let out = conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            ConvDims { cin, cout, rows, len, k },
        );
        let shape = if self.value(x).rank() == 2 {
            vec![cout, len]
        } else {
            vec![cout, rows, len]
        };
        self.push("conv1d", Tensor::from_parts(shape, out), Op::Conv1d { x, w, b }, &[x, w, b])
    }

    // ---- structural -----------------------------------------------------

    /// Copies the listed rows of a matrix, in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if rows.is_empty() {
            return Err(Error::dim("gather_rows: empty index list"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim(format!("gather_rows: index {bad} out of range for {r} rows")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(src.row(i));
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![rows.len(), c], out),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Places row `i` of each part at output row `indices[i]`. The index
    /// lists of all parts must partition `0..total`.
    pub fn scatter_rows(&mut self, parts: &[(Var, &[usize])]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&(v, _)) => self.dims2(v)?.1,
            None => return Err(Error::dim("scatter_rows: no parts")),
        };
        let total: usize = parts.iter().map(|(_, idx)| idx.len()).sum();
        let mut seen = vec![false; total];
        let mut out = vec![0.0; total * cols];
        for &(v, idx) in parts {
            let (r, c) = self.dims2(v)?;
            if c != cols || r != idx.len() {
                return Err(Error::dim(format!(
                    "scatter_rows: part {r}x{c} does not match {} indices of width {cols}",
                    idx.len()
                )));
            }
            let src = self.value(v);
            for (i, &t) in idx.iter().enumerate() {
                if t >= total || seen[t] {
                    return Err(Error::dim(format!(
                        "scatter_rows: indices do not partition 0..{total} (row {t})"
                    )));
                }
                seen[t] = true;
                out[t * cols..(t + 1) * cols].copy_from_slice(src.row(i));
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let op = Op::ScatterRows {
            parts: parts.iter().map(|&(v, idx)| (v, idx.to_vec())).collect(),
        };
        self.push("scatter_rows", Tensor::from_parts(vec![total, cols], out), op, &inputs)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = match xs.first() {
            Some(&v) => self.dims2(v)?.0,
            None => return Err(Error::dim("concat_cols: nothing to concatenate")),
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let (r, c) = self.dims2(v)?;
            if r != rows {
                return Err(Error::dim(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(xs.to_vec()),
            xs,
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if start >= end || end > cols {
            return Err(Error::dim(format!("slice_cols {start}..{end} of {cols} columns")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&src.row(r)[start..end]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![rows, end - start], out),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(Error::dim("stack: nothing to stack")),
        };
        let mut out = Vec::with_capacity(xs.len() * self.value(xs[0]).numel());
        for &v in xs {
            if self.shape(v) != first.as_slice() {
                return Err(Error::dim(format!(
                    "stack: shape {:?} vs {first:?}",
                    self.shape(v)
                )));
            }
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&first);
        self.push("stack", Tensor::from_parts(shape, out), Op::Stack(xs.to_vec()), xs)
    }

    // ---- reductions and losses -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `KL(p ‖ q)` summed along `axis` and averaged over every other
    /// position, where `log_q` holds log-probabilities.
    pub fn kl_divergence(&mut self, log_q: Var, p: &Tensor, axis: usize) -> Result<Var> {
        let lq = self.value(log_q);
        if lq.shape() != p.shape() {
            return Err(Error::dim(format!(
                "kl_divergence: prediction {:?} vs target {:?}",
                lq.shape(),
                p.shape()
            )));
        }
        let (outer, n, inner) = axis_layout(p.shape(), axis)?;
        let (pd, qd) = (p.data(), lq.data());
        let mut total = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                let mut mass = 0.0;
                for j in 0..n {
                    let at = o * n * inner + j * inner + i;
                    let pv = pd[at];
                    if pv.is_nan() || pv < 0.0 {
                        return Err(Error::Input(format!("kl_divergence: target value {pv} is negative")));
                    }
                    mass += pv;
                    if pv > 0.0 {
                        total += pv * (pv.ln() - qd[at]);
                    }
                }
                if (mass - 1.0).abs() > 1e-6 {
                    return Err(Error::Input(format!(
                        "kl_divergence: target slice sums to {mass}, expected 1"
                    )));
                }
            }
        }
        let rows = outer * inner;
        self.push(
            "kl_divergence",
            Tensor::scalar(total / rows as f64),
            Op::KlDiv {
                logq: log_q,
                p: p.clone(),
                rows,
            },
            &[log_q],
        )
    }

    /// Negative log-likelihood of `target` under a vector of log-probabilities.
    pub fn nll(&mut self, log_p: Var, target: usize) -> Result<Var> {
        let lp = self.value(log_p);
        if target >= lp.numel() {
            return Err(Error::Input(format!(
                "nll: target {target} out of range for {} classes",
                lp.numel()
            )));
        }
        let v = -lp.data()[target];
        self.push("nll", Tensor::scalar(v), Op::Nll { logp: log_p, target }, &[log_p])
    }

    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.numel() {
            return Err(Error::dim(format!(
                "mse: {} predictions vs {} targets",
                pv.numel(),
                target.numel()
            )));
        }
        let n = pv.numel() as f64;
        let s = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        self.push(
            "mse",
            Tensor::scalar(s),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            &[pred],
        )
    }

    // ---- reverse pass ---------------------------------------------------

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        out.resize_with(self.nodes.len(), || None);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                out[idx] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => add_into(existing, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.shape()[1];
                if needs(a) {
                    acc(a, kernels::matmul_bt(g, val(b), m, n, k));
                }
                if needs(b) {
                    acc(b, kernels::matmul_at(val(a), g, m, k, n));
                }
            }
            &Op::MatMulBt(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.shape()[0];
                if needs(a) {
                    acc(a, kernels::matmul(g, val(b), m, n, k));
                }
                if needs(b) {
                    acc(b, kernels::matmul_at(g, val(a), m, n, k));
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::AddRow(a, bias) => {
                acc(a, g.to_vec());
                if needs(bias) {
                    let n = val(bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        add_into(&mut db, row);
                    }
                    acc(bias, db);
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    acc(a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                }
                if needs(b) {
                    acc(b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Scale(a, c) => acc(a, g.iter().map(|v| v * c).collect()),
            &Op::Relu(a) => acc(
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            &Op::Gelu(a) => acc(
                a,
                g.iter().zip(val(a)).map(|(g, &x)| g * kernels::gelu_grad(x)).collect(),
            ),
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_layout(node.value.shape(), axis).unwrap();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc(x, dx);
            }
            &Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_layout(node.value.shape(), axis).unwrap();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let gsum: f64 = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = g[at(j)] - y[at(j)].exp() * gsum;
                        }
                    }
                }
                acc(x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let (outer, n, inner) = axis_layout(node.value.shape(), *axis).unwrap();
                let gv = val(*gain);
                let mut dx = vec![0.0; xhat.len()];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dy = vec![0.0; n];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let is = inv_std[o * inner + i];
                        let mut mean_dy = 0.0;
                        let mut mean_dyx = 0.0;
                        for j in 0..n {
                            let gj = g[at(j)];
                            dgain[j] += gj * xhat[at(j)];
                            dbias[j] += gj;
                            dy[j] = gj * gv[j];
                            mean_dy += dy[j];
                            mean_dyx += dy[j] * xhat[at(j)];
                        }
                        mean_dy /= n as f64;
                        mean_dyx /= n as f64;
                        for j in 0..n {
                            dx[at(j)] = is * (dy[j] - mean_dy - xhat[at(j)] * mean_dyx);
                        }
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            &Op::Conv1d { x, w, b } => {
                let (cin, rows, len) = conv_input_dims(self.nodes[x.0].value.shape()).unwrap();
                let ws = self.nodes[w.0].value.shape();
                let dims = ConvDims {
                    cin,
                    cout: ws[0],
                    rows,
                    len,
                    k: ws[2],
                };
                let (dx, dw, db) = conv1d_backward(val(x), val(w), g, dims, needs(x));
                if needs(x) {
                    acc(x, dx);
                }
                acc(w, dw);
                acc(b, db);
            }
            Op::GatherRows { x, rows } => {
                let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                let mut dx = vec![0.0; r * c];
                for (i, &t) in rows.iter().enumerate() {
                    add_into(&mut dx[t * c..(t + 1) * c], &g[i * c..(i + 1) * c]);
                }
                acc(*x, dx);
            }
            Op::ScatterRows { parts } => {
                let cols = node.value.shape()[1];
                for (v, idx) in parts {
                    if !needs(*v) {
                        continue;
                    }
                    let mut dv = Vec::with_capacity(idx.len() * cols);
                    for &t in idx {
                        dv.extend_from_slice(&g[t * cols..(t + 1) * cols]);
                    }
                    acc(*v, dv);
                }
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &v in xs {
                    let c = self.nodes[v.0].value.shape()[1];
                    if needs(v) {
                        let mut dv = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dv.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        acc(v, dv);
                    }
                    offset += c;
                }
            }
            &Op::SliceCols { x, start } => {
                let (rows, cols) = self.nodes[x.0].value.dims2().unwrap();
                let w = node.value.shape()[1];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(x, dx);
            }
            Op::Stack(xs) => {
                let n = self.nodes[xs[0].0].value.numel();
                for (i, &v) in xs.iter().enumerate() {
                    acc(v, g[i * n..(i + 1) * n].to_vec());
                }
            }
            &Op::Sum(x) => acc(x, vec![g[0]; self.nodes[x.0].value.numel()]),
            &Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                acc(x, vec![g[0] / n as f64; n]);
            }
            Op::KlDiv { logq, p, rows } => {
                let s = -g[0] / *rows as f64;
                acc(*logq, p.data().iter().map(|pv| pv * s).collect());
            }
            &Op::Nll { logp, target } => {
                let mut d = vec![0.0; self.nodes[logp.0].value.numel()];
                d[target] = -g[0];
                acc(logp, d);
            }
            Op::Mse { pred, target } => {
                let pv = val(*pred);
                let s = 2.0 * g[0] / pv.len() as f64;
                acc(
                    *pred,
                    pv.iter().zip(target.data()).map(|(a, b)| s * (a - b)).collect(),
                );
            }
        }
    }
}

/// Numerically stable softmax along `axis` (max-subtraction).
pub fn softmax_values(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_layout(x.shape(), axis)?;
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| xs[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (xs[at(j)] - max).exp();
                out[at(j)] = e;
                denom += e;
            }
            for j in 0..n {
                out[at(j)] /= denom;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `x - logsumexp(x)` along `axis`.
pub fn log_softmax_values(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_layout(x.shape(), axis)?;
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| xs[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..n).map(|j| (xs[at(j)] - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[at(j)] = xs[at(j)] - lse;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    cout: usize,
    rows: usize,
    len: usize,
    k: usize,
}

fn conv_input_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, l] => Ok((c, 1, l)),
        [c, r, l] => Ok((c, r, l)),
        _ => Err(Error::dim(format!("conv1d input must be rank 2 or 3, got {shape:?}"))),
    }
}

// Each output element accumulates bias first, then input channels in
// order, then kernel taps in order, exactly like the textbook loop nest.
fn conv1d_forward(x: &[f64], w: &[f64], b: &[f64], d: ConvDims) -> Vec<f64> {
    let ConvDims { cin, cout, rows, len, k } = d;
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; cout * rows * len];
    for co in 0..cout {
        for r in 0..rows {
            let o = &mut out[(co * rows + r) * len..(co * rows + r + 1) * len];
            o.fill(b[co]);
            for ci in 0..cin {
                let xs = &x[(ci * rows + r) * len..(ci * rows + r + 1) * len];
                for j in 0..k {
                    let wv = w[(co * cin + ci) * k + j];
                    // out[t] += wv * x[t + j - pad] for in-range source positions
                    let lo = pad.saturating_sub(j);
                    let hi = (len + pad).saturating_sub(j).min(len);
                    for t in lo..hi {
                        o[t] += wv * xs[t + j - pad];
                    }
                }
            }
        }
    }
    out
}

fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: ConvDims,
    want_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ConvDims { cin, cout, rows, len, k } = d;
    let pad = (k - 1) / 2;
    let mut dx = if want_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        for r in 0..rows {
            let gs = &g[(co * rows + r) * len..(co * rows + r + 1) * len];
            db[co] += gs.iter().sum::<f64>();
            for ci in 0..cin {
                let base = (ci * rows + r) * len;
                let xs = &x[base..base + len];
                for j in 0..k {
                    let lo = pad.saturating_sub(j);
                    let hi = (len + pad).saturating_sub(j).min(len);
                    let widx = (co * cin + ci) * k + j;
                    let mut s = 0.0;
                    for t in lo..hi {
                        s += gs[t] * xs[t + j - pad];
                    }
                    dw[widx] += s;
                    if want_dx {
                        let wv = w[widx];
                        let dxs = &mut dx[base..base + len];
                        for t in lo..hi {
                            dxs[t + j - pad] += wv * gs[t];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
