//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every parent has a smaller
//! index than its children and a single reverse sweep visits the tape in
//! topological order.

use super::tensor::{matmul_into, Tensor};
use super::{ParamId, ParamStore, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Reshape(Var),
    GatherCols(Var, Vec<usize>),
    Sin(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cell_mask: Vec<bool>,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedConv {
        x: Var,
        w: Var,
        bias: Var,
        filter_mask: Vec<bool>,
        cell_mask: Vec<bool>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SymmetricCrossEntropy(Var),
}

struct Node {
    // `None` for parameters, whose values live in the borrowed store.
    value: Option<Tensor>,
    op: Op,
}

/// Gradients with respect to every tensor of a [`ParamStore`], aligned by
/// [`ParamId`]. Parameters the loss does not reach get zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Single-writer tape over a borrowed parameter snapshot.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    trap_non_finite: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            trap_non_finite: true,
        }
    }

    /// Turns the non-finite check after each op on or off.
    pub fn with_trap(mut self, trap_non_finite: bool) -> Self {
        self.trap_non_finite = trap_non_finite;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if self.trap_non_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = super::tensor::matmul(self.value(a), self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = super::tensor::transpose(self.value(a))?;
        self.push("transpose", value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b))
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let last = *ta.shape().last().unwrap_or(&1);
        if tb.shape() != [last] {
            return Err(mismatch("add_bias", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(last) {
            for (x, b) in chunk.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b))
    }

    /// Multiplies every last-axis slice of `a` elementwise by the vector `w`.
    pub fn mul_broadcast(&mut self, a: Var, w: Var) -> Result<Var, TensorError> {
        let (ta, tw) = (self.value(a), self.value(w));
        let last = *ta.shape().last().unwrap_or(&1);
        if tw.shape() != [last] {
            return Err(mismatch("mul_broadcast", ta, tw));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(last) {
            for (x, s) in chunk.iter_mut().zip(tw.data()) {
                *x *= s;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul_broadcast", value, Op::MulBroadcast(a, w))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(a, factor))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let rows = {
            let t = self.value(*first);
            t.require_rank("concat", 2)?;
            t.rows()
        };
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            t.require_rank("concat", 2)?;
            if t.rows() != rows {
                return Err(mismatch("concat", self.value(*first), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.push("concat", value, Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// Flattens all axes after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.value(a).shape().to_vec();
        let rows = *shape.first().unwrap_or(&1);
        let rest = shape.iter().skip(1).product();
        self.reshape(a, &[rows, rest])
    }

    /// Selects columns of a 2-D tensor.
    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let ta = self.value(a);
        ta.require_rank("gather_cols", 2)?;
        if let Some(&bad) = cols.iter().find(|&&c| c >= ta.cols()) {
            return Err(TensorError::InvalidArgument {
                op: "gather_cols",
                reason: format!("column {bad} out of range for shape {:?}", ta.shape()),
            });
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * cols.len());
        for i in 0..rows {
            let row = ta.row(i);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        let value = Tensor::new(vec![rows, cols.len()], data)?;
        self.push("gather_cols", value, Op::GatherCols(a, cols.to_vec()))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.sin()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("sin", value, Op::Sin(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    /// Layer normalisation of `x: [batch, h, w, c]` over the valid cells and
    /// all channels of each sample, followed by a per-channel affine map.
    /// Cells outside `cell_mask` (row-major `h x w`) stay exactly zero.
    pub fn layer_norm_masked(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        cell_mask: &[bool],
        eps: f64,
    ) -> Result<Var, TensorError> {
        let tx = self.value(x);
        tx.require_rank("layer_norm", 4)?;
        let (batch, h, w, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        if cell_mask.len() != h * w {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: vec![cell_mask.len()],
            });
        }
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(mismatch("layer_norm", tx, self.value(p)));
            }
        }
        let valid = cell_mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                reason: "mask has no valid cells".into(),
            });
        }
        let n = (valid * c) as f64;
        let (tg, tb) = (self.value(gamma).data(), self.value(beta).data());
        let per_sample = h * w * c;
        let mut out = vec![0.0; tx.len()];
        let mut normalized = vec![0.0; tx.len()];
        let mut inv_std = Vec::with_capacity(batch);
        for b in 0..batch {
            let xs = &tx.data()[b * per_sample..(b + 1) * per_sample];
            let cells = || {
                cell_mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(|(cell, _)| cell)
            };
            let mean = cells()
                .map(|cell| xs[cell * c..(cell + 1) * c].iter().sum::<f64>())
                .sum::<f64>()
                / n;
            let var = cells()
                .map(|cell| {
                    xs[cell * c..(cell + 1) * c]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / n;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for cell in cells() {
                for ch in 0..c {
                    let idx = b * per_sample + cell * c + ch;
                    let xhat = (xs[cell * c + ch] - mean) * istd;
                    normalized[idx] = xhat;
                    out[idx] = xhat * tg[ch] + tb[ch];
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cell_mask: cell_mask.to_vec(),
                normalized,
                inv_std,
            },
        )
    }

    /// Cross-correlation of `x: [batch, h, w, c_in]` with `filters:
    /// [c_out, kh, kw, c_in]` (odd, square kernels), zero padding, filter taps
    /// outside `filter_mask` treated as zero, outputs computed only at cells
    /// inside `cell_mask` and zero elsewhere.
    pub fn masked_conv2d(
        &mut self,
        x: Var,
        filters: Var,
        bias: Var,
        filter_mask: &[bool],
        cell_mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (self.value(x), self.value(filters), self.value(bias));
        tx.require_rank("masked_conv2d", 4)?;
        tw.require_rank("masked_conv2d", 4)?;
        let (batch, h, w, c_in) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (c_out, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if tw.shape()[3] != c_in || kh != kw || kh % 2 == 0 {
            return Err(mismatch("masked_conv2d", tx, tw));
        }
        if tb.shape() != [c_out] {
            return Err(mismatch("masked_conv2d", tw, tb));
        }
        if filter_mask.len() != kh * kw || cell_mask.len() != h * w {
            return Err(TensorError::InvalidArgument {
                op: "masked_conv2d",
                reason: format!(
                    "mask sizes {}/{} do not match kernel {kh}x{kw} and grid {h}x{w}",
                    filter_mask.len(),
                    cell_mask.len()
                ),
            });
        }
        let taps = conv_taps(h, w, kh, filter_mask, cell_mask);
        let mut out = vec![0.0; batch * h * w * c_out];
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        for b in 0..batch {
            for (cell, cell_taps) in taps.iter().enumerate() {
                if !cell_mask[cell] {
                    continue;
                }
                let o_base = (b * h * w + cell) * c_out;
                let out_cell = &mut out[o_base..o_base + c_out];
                out_cell.copy_from_slice(bd);
                for &(tap, src) in cell_taps {
                    let xin = &xd[(b * h * w + src) * c_in..(b * h * w + src + 1) * c_in];
                    for (o, acc) in out_cell.iter_mut().enumerate() {
                        let wrow = &wd[(o * kh * kw + tap) * c_in..(o * kh * kw + tap + 1) * c_in];
                        *acc += wrow.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, h, w, c_out], out)?;
        self.push(
            "masked_conv2d",
            value,
            Op::MaskedConv {
                x,
                w: filters,
                bias,
                filter_mask: filter_mask.to_vec(),
                cell_mask: cell_mask.to_vec(),
            },
        )
    }

    /// Scales each row of a 2-D tensor to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        ta.require_rank("normalize_rows", 2)?;
        let mut norms = Vec::with_capacity(ta.rows());
        let mut data = Vec::with_capacity(ta.len());
        for i in 0..ta.rows() {
            let row = ta.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(TensorError::ZeroNorm { row: i });
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("normalize_rows", value, Op::NormalizeRows { x: a, norms })
    }

    /// Symmetric softmax cross-entropy of a square logit matrix with the
    /// diagonal as targets:
    /// `(1/2N) * sum_p [lse(row p) - s_pp + lse(col p) - s_pp]`.
    pub fn symmetric_cross_entropy(&mut self, logits: Var) -> Result<Var, TensorError> {
        let t = self.value(logits);
        t.require_rank("symmetric_cross_entropy", 2)?;
        if t.rows() != t.cols() || t.rows() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "symmetric_cross_entropy",
                reason: format!("expected a non-empty square matrix, got {:?}", t.shape()),
            });
        }
        let loss = symmetric_cross_entropy_value(t);
        self.push(
            "symmetric_cross_entropy",
            Tensor::scalar(loss),
            Op::SymmetricCrossEntropy(logits),
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    for (acc, v) in out.grads[id.0].data_mut().iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let g_row = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let b_row = &tb.data()[p * m..(p + 1) * m];
                            da[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                        }
                    }
                    let at = super::tensor::transpose(ta)?;
                    let mut db = vec![0.0; k * m];
                    matmul_into(at.data(), &g, &mut db, k, n, m);
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Transpose(a) => {
                    let ta = self.value(*a);
                    let (n, m) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            da[i * m + j] = g[j * n + i];
                        }
                    }
                    accumulate(&mut grads, *a, &da);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::AddBias(a, bias) => {
                    let last = self.value(*bias).len();
                    let mut db = vec![0.0; last];
                    for chunk in g.chunks(last) {
                        for (acc, v) in db.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *bias, &db);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da: Vec<f64> = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::MulBroadcast(a, w) => {
                    let (ta, tw) = (self.value(*a), self.value(*w));
                    let last = tw.len();
                    let mut da = vec![0.0; g.len()];
                    let mut dw = vec![0.0; last];
                    for ((gc, xc), dac) in g
                        .chunks(last)
                        .zip(ta.data().chunks(last))
                        .zip(da.chunks_mut(last))
                    {
                        for j in 0..last {
                            dac[j] = gc[j] * tw.data()[j];
                            dw[j] += gc[j] * xc[j];
                        }
                    }
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *w, &dw);
                }
                Op::Scale(a, factor) => {
                    let da: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Concat(parts) => {
                    let total = self.value(Var(idx)).cols();
                    let rows = self.value(Var(idx)).rows();
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut dp = Vec::with_capacity(rows * cols);
                        for i in 0..rows {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + cols]);
                        }
                        accumulate(&mut grads, p, &dp);
                        offset += cols;
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, &g),
                Op::GatherCols(a, cols) => {
                    let ta = self.value(*a);
                    let (rows, width) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; rows * width];
                    for i in 0..rows {
                        for (j, &c) in cols.iter().enumerate() {
                            da[i * width + c] += g[i * cols.len() + j];
                        }
                    }
                    accumulate(&mut grads, *a, &da);
                }
                Op::Sin(a) => {
                    let ta = self.value(*a);
                    let da: Vec<f64> = g.iter().zip(ta.data()).map(|(x, v)| x * v.cos()).collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(ta.data())
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; self.value(*a).len()];
                    accumulate(&mut grads, *a, &da);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let da = vec![g[0] / n as f64; n];
                    accumulate(&mut grads, *a, &da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cell_mask,
                    normalized,
                    inv_std,
                } => {
                    let shape = self.value(*x).shape();
                    let (batch, c) = (shape[0], shape[3]);
                    let per_sample = shape[1] * shape[2] * c;
                    let tg = self.value(*gamma).data();
                    let valid: Vec<usize> = cell_mask
                        .iter()
                        .enumerate()
                        .filter(|(_, &m)| m)
                        .map(|(i, _)| i)
                        .collect();
                    let n = (valid.len() * c) as f64;
                    let mut dx = vec![0.0; batch * per_sample];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..batch {
                        let base = b * per_sample;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for &cell in &valid {
                            for ch in 0..c {
                                let i = base + cell * c + ch;
                                dgamma[ch] += g[i] * normalized[i];
                                dbeta[ch] += g[i];
                                let dxhat = g[i] * tg[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * normalized[i];
                            }
                        }
                        for &cell in &valid {
                            for ch in 0..c {
                                let i = base + cell * c + ch;
                                let dxhat = g[i] * tg[ch];
                                dx[i] = inv_std[b] / n
                                    * (n * dxhat - sum_dxhat - normalized[i] * sum_dxhat_xhat);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                    accumulate(&mut grads, *gamma, &dgamma);
                    accumulate(&mut grads, *beta, &dbeta);
                }
                Op::MaskedConv {
                    x,
                    w,
                    bias,
                    filter_mask,
                    cell_mask,
                } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (batch, h, wd, c_in) =
                        (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                    let (c_out, kh) = (tw.shape()[0], tw.shape()[1]);
                    let taps = conv_taps(h, wd, kh, filter_mask, cell_mask);
                    let mut dx = vec![0.0; tx.len()];
                    let mut dw = vec![0.0; tw.len()];
                    let mut db = vec![0.0; c_out];
                    for b in 0..batch {
                        for (cell, cell_taps) in taps.iter().enumerate() {
                            if !cell_mask[cell] {
                                continue;
                            }
                            let g_cell = &g[(b * h * wd + cell) * c_out..(b * h * wd + cell + 1) * c_out];
                            for (acc, v) in db.iter_mut().zip(g_cell) {
                                *acc += v;
                            }
                            for &(tap, src) in cell_taps {
                                let x_base = (b * h * wd + src) * c_in;
                                for (o, &go) in g_cell.iter().enumerate() {
                                    if go == 0.0 {
                                        continue;
                                    }
                                    let w_base = (o * kh * kh + tap) * c_in;
                                    for ci in 0..c_in {
                                        dx[x_base + ci] += tw.data()[w_base + ci] * go;
                                        dw[w_base + ci] += tx.data()[x_base + ci] * go;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                    accumulate(&mut grads, *w, &dw);
                    accumulate(&mut grads, *bias, &db);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = self.value(Var(idx));
                    let cols = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for (i, &norm) in norms.iter().enumerate() {
                        let yr = y.row(i);
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dx[i * cols + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::SymmetricCrossEntropy(logits) => {
                    let t = self.value(*logits);
                    let n = t.rows();
                    let (row_lse, col_lse) = row_col_logsumexp(t);
                    let scale = g[0] / (2.0 * n as f64);
                    let mut dl = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            let s = t.get(i, j);
                            let mut v = (s - row_lse[i]).exp() + (s - col_lse[j]).exp();
                            if i == j {
                                v -= 2.0;
                            }
                            dl[i * n + j] = scale * v;
                        }
                    }
                    accumulate(&mut grads, *logits, &dl);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (acc, c) in existing.iter_mut().zip(contribution) {
                *acc += c;
            }
        }
        slot @ None => *slot = Some(contribution.to_vec()),
    }
}

/// For every output cell, the `(tap index, source cell)` pairs that feed it:
/// taps inside the filter mask whose source lies on the grid and inside the
/// cell mask.
fn conv_taps(
    h: usize,
    w: usize,
    k_side: usize,
    filter_mask: &[bool],
    cell_mask: &[bool],
) -> Vec<Vec<(usize, usize)>> {
    let half = (k_side / 2) as isize;
    let mut taps = vec![Vec::new(); h * w];
    for i in 0..h {
        for j in 0..w {
            if !cell_mask[i * w + j] {
                continue;
            }
            for a in 0..k_side {
                for c in 0..k_side {
                    if !filter_mask[a * k_side + c] {
                        continue;
                    }
                    let (si, sj) = (i as isize + a as isize - half, j as isize + c as isize - half);
                    if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                        continue;
                    }
                    let src = si as usize * w + sj as usize;
                    if cell_mask[src] {
                        taps[i * w + j].push((a * k_side + c, src));
                    }
                }
            }
        }
    }
    taps
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn row_col_logsumexp(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = t.rows();
    let rows = (0..n).map(|i| logsumexp(t.row(i).iter().copied())).collect();
    let cols = (0..n)
        .map(|j| logsumexp((0..n).map(move |i| t.get(i, j))))
        .collect();
    (rows, cols)
}

pub(crate) fn symmetric_cross_entropy_value(t: &Tensor) -> f64 {
    let n = t.rows();
    let (row_lse, col_lse) = row_col_logsumexp(t);
    let total: f64 = (0..n)
        .map(|p| (row_lse[p] - t.get(p, p)) + (col_lse[p] - t.get(p, p)))
        .sum();
    total / (2.0 * n as f64)
}
