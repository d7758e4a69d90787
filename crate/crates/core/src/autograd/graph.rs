//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records primitive operations in execution order; recording
//! order is the topological order, and [`Graph::backward`] replays it in
//! exact reverse. Leaf tensors are copied in, so a graph owns all of its
//! values and can be dropped after backward (one tape per forward pass).

use crate::error::{Error, Result};

use super::kernels;
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a[m×k] · b[k×n]
    Matmul { a: ValId, b: ValId },
    /// a[m×k] · bᵀ where b is [n×k]
    MatmulBt { a: ValId, b: ValId },
    Add { a: ValId, b: ValId },
    Mul { a: ValId, b: ValId },
    Scale { a: ValId, c: f64 },
    Exp { a: ValId },
    Silu { a: ValId },
    /// Elementwise min; on ties the gradient follows `a`.
    MinElem { a: ValId, b: ValId },
    /// Clamp to [lo, hi]; gradient passes through the closed interval.
    Clamp { a: ValId, lo: f64, hi: f64 },
    Sum { a: ValId },
    Mean { a: ValId },
    /// Row-wise softmax; `causal` restricts row i to columns 0..=i.
    Softmax { a: ValId, causal: bool },
    /// x / sqrt(mean(x²) + 1e-6) · gain, row-wise.
    RmsNorm { x: ValId, gain: ValId },
    /// Row lookup: out[t] = table[ids[t]].
    Embedding { table: ValId, ids: Vec<usize> },
    /// Mean over rows of −log softmax(logits)ᵢ[targetᵢ]; scalar output.
    SoftmaxCrossEntropy { logits: ValId, targets: Vec<usize> },
    /// out[i] = log softmax(logits)ᵢ[targetᵢ]; 1-D output.
    LogSoftmaxGather { logits: ValId, targets: Vec<usize> },
    SliceCols { a: ValId, start: usize, len: usize },
    SliceRows { a: ValId, start: usize, len: usize },
    ConcatCols { parts: Vec<ValId> },
}

struct Node {
    op: Op,
    out: ValId,
}

const RMS_EPS: f64 = 1e-6;

/// Recorded computation: values plus the ordered operation list.
#[derive(Default)]
pub struct Graph {
    vals: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, t: Tensor, op: Op) -> ValId {
        let id = ValId(self.vals.len());
        self.vals.push(t);
        self.grads.push(None);
        self.nodes.push(Node { op, out: id });
        id
    }

    /// Copies a tensor onto the tape as a leaf, keeping its `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> ValId {
        self.push(t.clone(), Op::Leaf)
    }

    /// Leaf from owned data with `requires_grad == false`.
    pub fn constant(&mut self, t: Tensor) -> ValId {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.vals[id.0]
    }

    /// Gradient of the last `backward` with respect to `id`, if any flowed.
    pub fn grad(&self, id: ValId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn requires(&self, id: ValId) -> bool {
        self.vals[id.0].requires_grad()
    }

    fn shape_err(&self, op: &'static str, a: ValId, b: ValId) -> Error {
        Error::Shape {
            op,
            lhs: self.vals[a.0].shape().to_vec(),
            rhs: self.vals[b.0].shape().to_vec(),
        }
    }

    fn dims2(&self, id: ValId) -> (usize, usize) {
        let t = &self.vals[id.0];
        debug_assert_eq!(t.shape().len(), 2);
        (t.shape()[0], t.shape()[1])
    }

    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[1];
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(ta.data(), tb.data(), m, k, n, &mut out);
        let rg = self.requires(a) || self.requires(b);
        let t = Tensor::new(vec![m, n], out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::Matmul { a, b }))
    }

    /// a · bᵀ with b stored row-major as [n×k].
    pub fn matmul_bt(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(self.shape_err("matmul_bt", a, b));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[0];
        let mut out = vec![0.0; m * n];
        kernels::matmul_a_bt_acc(ta.data(), tb.data(), m, k, n, &mut out);
        let rg = self.requires(a) || self.requires(b);
        let t = Tensor::new(vec![m, n], out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::MatmulBt { a, b }))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: ValId,
        b: ValId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<ValId> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(name, a, b));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires(a) || self.requires(b);
        let t = Tensor::new(ta.shape().to_vec(), data)?.with_requires_grad(rg);
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn min_elem(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.binary_elementwise("min_elem", a, b, f64::min, Op::MinElem { a, b })
    }

    fn unary(&mut self, a: ValId, f: impl Fn(f64) -> f64, op: Op) -> ValId {
        let ta = &self.vals[a.0];
        let data: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)
            .expect("unary preserves shape")
            .with_requires_grad(self.requires(a));
        self.push(t, op)
    }

    pub fn scale(&mut self, a: ValId, c: f64) -> ValId {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn exp(&mut self, a: ValId) -> ValId {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn silu(&mut self, a: ValId) -> ValId {
        self.unary(a, |x| x / (1.0 + (-x).exp()), Op::Silu { a })
    }

    pub fn clamp(&mut self, a: ValId, lo: f64, hi: f64) -> ValId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    pub fn sum(&mut self, a: ValId) -> ValId {
        let total: f64 = self.vals[a.0].data().iter().sum();
        let t = Tensor::scalar(total).with_requires_grad(self.requires(a));
        self.push(t, Op::Sum { a })
    }

    pub fn mean(&mut self, a: ValId) -> ValId {
        let d = self.vals[a.0].data();
        let total: f64 = d.iter().sum();
        let t = Tensor::scalar(total / d.len() as f64).with_requires_grad(self.requires(a));
        self.push(t, Op::Mean { a })
    }

    /// Row-wise stabilized softmax. With `causal`, the input must be square
    /// and row i is normalized over columns 0..=i only, the rest forced to
    /// exactly zero — positions after i can never influence row i.
    pub fn softmax(&mut self, a: ValId, causal: bool) -> Result<ValId> {
        let ta = &self.vals[a.0];
        if ta.shape().len() != 2 || (causal && ta.shape()[0] != ta.shape()[1]) {
            return Err(Error::Shape {
                op: "softmax",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let mut data = ta.data().to_vec();
        for i in 0..rows {
            let limit = if causal { i + 1 } else { cols };
            kernels::softmax_row(&mut data[i * cols..i * cols + limit]);
            for v in &mut data[i * cols + limit..(i + 1) * cols] {
                *v = 0.0;
            }
        }
        let rg = self.requires(a);
        let t = Tensor::new(vec![rows, cols], data)?.with_requires_grad(rg);
        Ok(self.push(t, Op::Softmax { a, causal }))
    }

    pub fn rms_norm(&mut self, x: ValId, gain: ValId) -> Result<ValId> {
        let (tx, tg) = (&self.vals[x.0], &self.vals[gain.0]);
        if tx.shape().len() != 2 || tg.shape() != [tx.shape()[1]] {
            return Err(self.shape_err("rms_norm", x, gain));
        }
        let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &tx.data()[i * cols..(i + 1) * cols];
            let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            for j in 0..cols {
                data[i * cols + j] = row[j] * inv * tg.data()[j];
            }
        }
        let rg = self.requires(x) || self.requires(gain);
        let t = Tensor::new(vec![rows, cols], data)?.with_requires_grad(rg);
        Ok(self.push(t, Op::RmsNorm { x, gain }))
    }

    pub fn embedding(&mut self, table: ValId, ids: &[usize]) -> Result<ValId> {
        let tt = &self.vals[table.0];
        if tt.shape().len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: tt.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, dim) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Index(format!(
                "embedding id {bad} out of range for table of {vocab} rows"
            )));
        }
        let mut data = vec![0.0; ids.len() * dim];
        for (t, &id) in ids.iter().enumerate() {
            data[t * dim..(t + 1) * dim].copy_from_slice(&tt.data()[id * dim..(id + 1) * dim]);
        }
        let rg = self.requires(table);
        let t = Tensor::new(vec![ids.len(), dim], data)?.with_requires_grad(rg);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean over rows of −log softmax(logits)ᵢ[targetᵢ], stabilized by
    /// row-max subtraction. Gradient is (softmax − one-hot)/n.
    pub fn softmax_cross_entropy(&mut self, logits: ValId, targets: &[usize]) -> Result<ValId> {
        let tl = &self.vals[logits.0];
        if tl.shape().len() != 2 || tl.shape()[0] != targets.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (n, vocab) = (tl.shape()[0], tl.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!(
                "cross-entropy target {bad} out of range for {vocab} classes"
            )));
        }
        let mut total = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let row = &tl.data()[i * vocab..(i + 1) * vocab];
            total += kernels::log_sum_exp(row) - row[target];
        }
        let t = Tensor::scalar(total / n as f64).with_requires_grad(self.requires(logits));
        Ok(self.push(
            t,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// out[i] = log softmax(logits)ᵢ[targetᵢ] — the per-token log-probability
    /// under the full softmax.
    pub fn log_softmax_gather(&mut self, logits: ValId, targets: &[usize]) -> Result<ValId> {
        let tl = &self.vals[logits.0];
        if tl.shape().len() != 2 || tl.shape()[0] != targets.len() {
            return Err(Error::Shape {
                op: "log_softmax_gather",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (_, vocab) = self.dims2(logits);
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!(
                "log-softmax target {bad} out of range for {vocab} classes"
            )));
        }
        let data: Vec<f64> = targets
            .iter()
            .enumerate()
            .map(|(i, &target)| {
                let row = &tl.data()[i * vocab..(i + 1) * vocab];
                row[target] - kernels::log_sum_exp(row)
            })
            .collect();
        let t = Tensor::from_vec(data).with_requires_grad(self.requires(logits));
        Ok(self.push(
            t,
            Op::LogSoftmaxGather {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, a: ValId, start: usize, len: usize) -> Result<ValId> {
        let ta = &self.vals[a.0];
        if ta.shape().len() != 2 || start + len > ta.shape()[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let mut data = vec![0.0; rows * len];
        for i in 0..rows {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&ta.data()[i * cols + start..i * cols + start + len]);
        }
        let rg = self.requires(a);
        let t = Tensor::new(vec![rows, len], data)?.with_requires_grad(rg);
        Ok(self.push(t, Op::SliceCols { a, start, len }))
    }

    pub fn slice_rows(&mut self, a: ValId, start: usize, len: usize) -> Result<ValId> {
        let ta = &self.vals[a.0];
        if ta.shape().len() != 2 || start + len > ta.shape()[0] || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let cols = ta.shape()[1];
        let data = ta.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.requires(a);
        let t = Tensor::new(vec![len, cols], data)?.with_requires_grad(rg);
        Ok(self.push(t, Op::SliceRows { a, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[ValId]) -> Result<ValId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero parts"));
        }
        let rows = self.vals[parts[0].0].shape()[0];
        let mut total_cols = 0;
        for &p in parts {
            let tp = &self.vals[p.0];
            if tp.shape().len() != 2 || tp.shape()[0] != rows {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            total_cols += tp.shape()[1];
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for &p in parts {
            let tp = &self.vals[p.0];
            let cols = tp.shape()[1];
            for i in 0..rows {
                data[i * total_cols + offset..i * total_cols + offset + cols]
                    .copy_from_slice(&tp.data()[i * cols..(i + 1) * cols]);
            }
            offset += cols;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        let t = Tensor::new(vec![rows, total_cols], data)?.with_requires_grad(rg);
        Ok(self.push(
            t,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    fn grad_buf(&mut self, id: ValId) -> &mut Vec<f64> {
        let numel = self.vals[id.0].numel();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; numel])
    }

    /// Propagates d(loss)/d(value) to every `requires_grad` value reachable
    /// from `loss`, visiting operations in exact reverse recording order.
    /// A second call on the same graph is a contract error; re-record the
    /// forward pass instead.
    pub fn backward(&mut self, loss: ValId) -> Result<()> {
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        if self.backward_done {
            return Err(Error::contract(
                "backward called twice on one graph; record a new forward pass",
            ));
        }
        self.backward_done = true;
        self.grad_buf(loss)[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            let out = self.nodes[idx].out;
            if !self.vals[out.0].requires_grad() || self.grads[out.0].is_none() {
                continue;
            }
            let dout = self.grads[out.0].take().expect("checked above");
            self.step_backward(idx, out, &dout);
            // Leaves keep their gradient for the caller to read back.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.grads[out.0] = Some(dout);
            }
        }
        Ok(())
    }

    fn step_backward(&mut self, idx: usize, out: ValId, dout: &[f64]) {
        // Ops read values immutably and accumulate into split-off grad bufs;
        // take each target buffer out, write, and put it back.
        macro_rules! with_grad {
            ($id:expr, |$buf:ident| $body:expr) => {
                if self.vals[$id.0].requires_grad() {
                    let mut $buf = std::mem::take(self.grad_buf($id));
                    $body;
                    self.grads[$id.0] = Some($buf);
                }
            };
        }

        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Matmul { a, b } => {
                let (m, k) = self.dims2(a);
                let n = self.dims2(b).1;
                with_grad!(a, |buf| kernels::matmul_a_bt_acc(
                    dout,
                    self.vals[b.0].data(),
                    m,
                    n,
                    k,
                    &mut buf
                ));
                with_grad!(b, |buf| kernels::matmul_at_b_acc(
                    self.vals[a.0].data(),
                    dout,
                    m,
                    k,
                    n,
                    &mut buf
                ));
            }
            &Op::MatmulBt { a, b } => {
                let (m, k) = self.dims2(a);
                let n = self.dims2(b).0;
                // out = a·bᵀ ⇒ da = dout·b, db = doutᵀ·a
                with_grad!(a, |buf| kernels::matmul_acc(
                    dout,
                    self.vals[b.0].data(),
                    m,
                    n,
                    k,
                    &mut buf
                ));
                with_grad!(b, |buf| kernels::matmul_at_b_acc(
                    dout,
                    self.vals[a.0].data(),
                    m,
                    n,
                    k,
                    &mut buf
                ));
            }
            &Op::Add { a, b } => {
                with_grad!(a, |buf| for (g, d) in buf.iter_mut().zip(dout) {
                    *g += d;
                });
                with_grad!(b, |buf| for (g, d) in buf.iter_mut().zip(dout) {
                    *g += d;
                });
            }
            &Op::Mul { a, b } => {
                with_grad!(a, |buf| {
                    for ((g, d), v) in buf.iter_mut().zip(dout).zip(self.vals[b.0].data()) {
                        *g += d * v;
                    }
                });
                with_grad!(b, |buf| {
                    for ((g, d), v) in buf.iter_mut().zip(dout).zip(self.vals[a.0].data()) {
                        *g += d * v;
                    }
                });
            }
            &Op::Scale { a, c } => {
                with_grad!(a, |buf| for (g, d) in buf.iter_mut().zip(dout) {
                    *g += c * d;
                });
            }
            &Op::Exp { a } => {
                with_grad!(a, |buf| {
                    for ((g, d), y) in buf.iter_mut().zip(dout).zip(self.vals[out.0].data()) {
                        *g += d * y;
                    }
                });
            }
            &Op::Silu { a } => {
                with_grad!(a, |buf| {
                    for ((g, d), &x) in buf.iter_mut().zip(dout).zip(self.vals[a.0].data()) {
                        let s = 1.0 / (1.0 + (-x).exp());
                        *g += d * s * (1.0 + x * (1.0 - s));
                    }
                });
            }
            &Op::MinElem { a, b } => {
                let take_a: Vec<bool> = self.vals[a.0]
                    .data()
                    .iter()
                    .zip(self.vals[b.0].data())
                    .map(|(&x, &y)| x <= y)
                    .collect();
                with_grad!(a, |buf| {
                    for ((g, d), &ta) in buf.iter_mut().zip(dout).zip(&take_a) {
                        if ta {
                            *g += d;
                        }
                    }
                });
                with_grad!(b, |buf| {
                    for ((g, d), &ta) in buf.iter_mut().zip(dout).zip(&take_a) {
                        if !ta {
                            *g += d;
                        }
                    }
                });
            }
            &Op::Clamp { a, lo, hi } => {
                with_grad!(a, |buf| {
                    for ((g, d), &x) in buf.iter_mut().zip(dout).zip(self.vals[a.0].data()) {
                        if (lo..=hi).contains(&x) {
                            *g += d;
                        }
                    }
                });
            }
            &Op::Sum { a } => {
                let d = dout[0];
                with_grad!(a, |buf| for g in buf.iter_mut() {
                    *g += d;
                });
            }
            &Op::Mean { a } => {
                let d = dout[0] / self.vals[a.0].numel() as f64;
                with_grad!(a, |buf| for g in buf.iter_mut() {
                    *g += d;
                });
            }
            &Op::Softmax { a, causal } => {
                let (rows, cols) = self.dims2(out);
                with_grad!(a, |buf| {
                    let y = self.vals[out.0].data();
                    for i in 0..rows {
                        let limit = if causal { i + 1 } else { cols };
                        let yr = &y[i * cols..i * cols + limit];
                        let dr = &dout[i * cols..i * cols + limit];
                        let dot: f64 = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        let br = &mut buf[i * cols..i * cols + limit];
                        for ((g, &p), &d) in br.iter_mut().zip(yr).zip(dr) {
                            *g += p * (d - dot);
                        }
                    }
                });
            }
            &Op::RmsNorm { x, gain } => {
                let (rows, cols) = self.dims2(x);
                with_grad!(gain, |buf| {
                    let xd = self.vals[x.0].data();
                    for i in 0..rows {
                        let row = &xd[i * cols..(i + 1) * cols];
                        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (ms + RMS_EPS).sqrt();
                        let dr = &dout[i * cols..(i + 1) * cols];
                        for ((g, &xv), &d) in buf.iter_mut().zip(row).zip(dr) {
                            *g += d * xv * inv;
                        }
                    }
                });
                with_grad!(x, |buf| {
                    let xd = self.vals[x.0].data();
                    let gd = self.vals[gain.0].data();
                    for i in 0..rows {
                        let row = &xd[i * cols..(i + 1) * cols];
                        let dr = &dout[i * cols..(i + 1) * cols];
                        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (ms + RMS_EPS).sqrt();
                        let s: f64 = dr
                            .iter()
                            .zip(gd)
                            .zip(row)
                            .map(|((&d, &g), &xv)| d * g * xv)
                            .sum();
                        let k = s * inv * inv * inv / cols as f64;
                        let br = &mut buf[i * cols..(i + 1) * cols];
                        for ((b, &xv), (&d, &g)) in br.iter_mut().zip(row).zip(dr.iter().zip(gd)) {
                            *b += d * g * inv - xv * k;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let dim = self.dims2(table).1;
                with_grad!(table, |buf| {
                    for (t, &id) in ids.iter().enumerate() {
                        let dr = &dout[t * dim..(t + 1) * dim];
                        let br = &mut buf[id * dim..(id + 1) * dim];
                        for (g, &d) in br.iter_mut().zip(dr) {
                            *g += d;
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let (logits, targets) = (*logits, targets.clone());
                let (n, vocab) = self.dims2(logits);
                let scale = dout[0] / n as f64;
                with_grad!(logits, |buf| {
                    let ld = self.vals[logits.0].data();
                    let mut probs = vec![0.0; vocab];
                    for (i, &target) in targets.iter().enumerate() {
                        probs.copy_from_slice(&ld[i * vocab..(i + 1) * vocab]);
                        kernels::softmax_row(&mut probs);
                        let br = &mut buf[i * vocab..(i + 1) * vocab];
                        for (g, &p) in br.iter_mut().zip(&probs) {
                            *g += scale * p;
                        }
                        br[target] -= scale;
                    }
                });
            }
            Op::LogSoftmaxGather { logits, targets } => {
                let (logits, targets) = (*logits, targets.clone());
                let (_, vocab) = self.dims2(logits);
                with_grad!(logits, |buf| {
                    let ld = self.vals[logits.0].data();
                    let mut probs = vec![0.0; vocab];
                    for (i, &target) in targets.iter().enumerate() {
                        let d = dout[i];
                        if d == 0.0 {
                            continue;
                        }
                        probs.copy_from_slice(&ld[i * vocab..(i + 1) * vocab]);
                        kernels::softmax_row(&mut probs);
                        let br = &mut buf[i * vocab..(i + 1) * vocab];
                        for (g, &p) in br.iter_mut().zip(&probs) {
                            *g -= d * p;
                        }
                        br[target] += d;
                    }
                });
            }
            &Op::SliceCols { a, start, len } => {
                let cols = self.dims2(a).1;
                let rows = self.dims2(out).0;
                with_grad!(a, |buf| {
                    for i in 0..rows {
                        let dr = &dout[i * len..(i + 1) * len];
                        let br = &mut buf[i * cols + start..i * cols + start + len];
                        for (g, &d) in br.iter_mut().zip(dr) {
                            *g += d;
                        }
                    }
                });
            }
            &Op::SliceRows { a, start, len } => {
                let cols = self.dims2(a).1;
                with_grad!(a, |buf| {
                    let br = &mut buf[start * cols..(start + len) * cols];
                    for (g, &d) in br.iter_mut().zip(dout) {
                        *g += d;
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let (rows, total_cols) = self.dims2(out);
                let mut offset = 0;
                for p in parts {
                    let cols = self.dims2(p).1;
                    with_grad!(p, |buf| {
                        for i in 0..rows {
                            let dr = &dout[i * total_cols + offset..i * total_cols + offset + cols];
                            let br = &mut buf[i * cols..(i + 1) * cols];
                            for (g, &d) in br.iter_mut().zip(dr) {
                                *g += d;
                            }
                        }
                    });
                    offset += cols;
                }
            }
        }
    }
}
