//! Minimal dense-tensor reverse-mode autodiff tape.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`]
//! walks the nodes once in reverse execution order. Tensors are
//! identified by [`TensorId`] handles into the owning tape. The engine
//! is single-threaded by construction; a tape lives for one training
//! step and is dropped afterwards.

use std::sync::Arc;

use crate::scalar::Scalar;

/// Entry mask for row-softmax style ops: `true` marks a usable entry.
pub type Mask = Arc<Vec<bool>>;

const KL_EPS: f64 = 1e-9;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {op} with shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate row: {0}")]
    DegenerateRow(&'static str),
    #[error("degenerate batch: all positions masked in {0}")]
    DegenerateBatch(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
        width: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    Gelu {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    SoftmaxRows {
        x: usize,
        mask: Option<Mask>,
    },
    Sum {
        a: usize,
    },
    Embedding {
        table: usize,
        ids: Arc<Vec<usize>>,
    },
    KlRows {
        p: usize,
        q: usize,
        mask: Option<Mask>,
    },
    SoftCrossEntropy {
        student: usize,
        teacher: usize,
        row_mask: Option<Mask>,
    },
    TokenCrossEntropy {
        logits: usize,
        /// One entry per row; negative = ignored position.
        targets: Arc<Vec<i64>>,
    },
}

struct Node<F> {
    data: Vec<F>,
    shape: Vec<usize>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape; also owns all tensor storage.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Value of a scalar (single-element) tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0].to_f64()
    }

    fn push(&mut self, data: Vec<F>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "leaf data length must match shape product"
        );
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    pub fn leaf_f64(&mut self, data: &[f64], shape: Vec<usize>, requires_grad: bool) -> TensorId {
        let data = data.iter().map(|&x| F::from_f64(x)).collect();
        self.leaf(data, shape, requires_grad)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Rows/cols of a tensor treated as a matrix (trailing dim = cols).
    fn as_matrix(&self, id: TensorId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        let cols = *s.last().unwrap_or(&1);
        let rows = s.iter().rev().skip(1).product::<usize>().max(1);
        (rows, cols)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k1) = self.as_matrix(a);
        let (k2, n) = self.as_matrix(b);
        if self.nodes[a.0].shape.len() != 2 || self.nodes[b.0].shape.len() != 2 || k1 != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![F::ZERO; m * n];
        F::gemm(
            m, k1, n, 1.0, &self.nodes[a.0].data, false, &self.nodes[b.0].data, false, 0.0,
            &mut out,
        );
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| F::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, shape, rg, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| F::from_f64(x.to_f64() * y.to_f64()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, shape, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| F::from_f64(x.to_f64() * c))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0]);
        self.push(out, shape, rg, Op::Scale { a: a.0, c })
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument(format!(
                "transpose expects a matrix, got shape {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, vec![c, r], rg, Op::Transpose { a: a.0 }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.nodes[a.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(&[a.0]);
        Ok(self.push(data, shape, rg, Op::Reshape { a: a.0 }))
    }

    /// Columns `[start, start+width)` of a matrix.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, width: usize) -> Result<TensorId> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 || start + width > s[1] {
            return Err(TensorError::InvalidArgument(format!(
                "slice_cols [{start}, {}) out of bounds for shape {s:?}",
                start + width
            )));
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, vec![r, width], rg, Op::SliceCols { a: a.0, start, width }))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument("concat_cols of zero parts".into()));
        }
        let rows = self.nodes[parts[0].0].shape[0];
        let mut total_cols = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            total_cols += s[1];
        }
        let mut out = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for p in parts {
                let c = self.nodes[p.0].shape[1];
                out.extend_from_slice(&self.nodes[p.0].data[i * c..(i + 1) * c]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, vec![rows, total_cols], rg, Op::ConcatCols { parts: ids }))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| F::from_f64(gelu(x.to_f64())))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0]);
        self.push(out, shape, rg, Op::Gelu { a: a.0 })
    }

    /// Row-wise layer norm over the trailing dimension with learned gain/bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.as_matrix(x);
        if self.nodes[gain.0].data.len() != cols || self.nodes[bias.0].data.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let mut out = vec![F::ZERO; rows * cols];
        for i in 0..rows {
            let row = &self.nodes[x.0].data[i * cols..(i + 1) * cols];
            let (mean, rstd) = row_moments(row);
            for j in 0..cols {
                let xhat = (row[j].to_f64() - mean) * rstd;
                let y = xhat * self.nodes[gain.0].data[j].to_f64()
                    + self.nodes[bias.0].data[j].to_f64();
                out[i * cols + j] = F::from_f64(y);
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
        ))
    }

    /// Row-wise softmax over the trailing dimension. Masked entries are
    /// exactly 0 and excluded from normalization.
    pub fn softmax_rows(&mut self, x: TensorId, mask: Option<Mask>) -> Result<TensorId> {
        let (rows, cols) = self.as_matrix(x);
        if let Some(m) = &mask {
            if m.len() != rows * cols {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: self.nodes[x.0].shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = vec![F::ZERO; rows * cols];
        for i in 0..rows {
            let row = &self.nodes[x.0].data[i * cols..(i + 1) * cols];
            let entry_ok = |j: usize| mask.as_ref().is_none_or(|m| m[i * cols + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if entry_ok(j) {
                    max = max.max(v.to_f64());
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateRow("softmax row fully masked"));
            }
            let mut denom = 0.0;
            for (j, v) in row.iter().enumerate() {
                if entry_ok(j) {
                    denom += (v.to_f64() - max).exp();
                }
            }
            for j in 0..cols {
                if entry_ok(j) {
                    out[i * cols + j] = F::from_f64((row[j].to_f64() - max).exp() / denom);
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, shape, rg, Op::SoftmaxRows { x: x.0, mask }))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().map(|x| x.to_f64()).sum();
        let rg = self.rg(&[a.0]);
        self.push(vec![F::from_f64(s)], vec![1], rg, Op::Sum { a: a.0 })
    }

    /// Row-gather from an embedding table: output row `i` = `table[ids[i]]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let s = self.nodes[table.0].shape.clone();
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument(
                "embedding table must be a matrix".into(),
            ));
        }
        let (v, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::InvalidArgument(format!(
                    "embedding id {id} out of range (table rows {v})"
                )));
            }
            out.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table.0]);
        let n = ids.len();
        Ok(self.push(
            out,
            vec![n, d],
            rg,
            Op::Embedding {
                table: table.0,
                ids: Arc::new(ids.to_vec()),
            },
        ))
    }

    /// Mean over unmasked rows of `sum_j p * (ln p - ln q)`, with
    /// `0 * ln 0 := 0` and `q` clamped below by 1e-9 before the log.
    /// Gradient flows into `q` only; `p` is the (frozen) teacher side.
    /// A row is unmasked when it has at least one `true` entry.
    pub fn kl_rows(&mut self, p: TensorId, q: TensorId, mask: Option<Mask>) -> Result<TensorId> {
        if self.nodes[p.0].shape != self.nodes[q.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "kl_rows",
                lhs: self.nodes[p.0].shape.clone(),
                rhs: self.nodes[q.0].shape.clone(),
            });
        }
        let (rows, cols) = self.as_matrix(p);
        if let Some(m) = &mask {
            if m.len() != rows * cols {
                return Err(TensorError::ShapeMismatch {
                    op: "kl_rows",
                    lhs: vec![rows, cols],
                    rhs: vec![m.len()],
                });
            }
        }
        let mut total = 0.0;
        let mut valid_rows = 0usize;
        for i in 0..rows {
            let entry_ok = |j: usize| mask.as_ref().is_none_or(|m| m[i * cols + j]);
            let mut any = false;
            let mut row_sum = 0.0;
            for j in 0..cols {
                if !entry_ok(j) {
                    continue;
                }
                any = true;
                let pv = self.nodes[p.0].data[i * cols + j].to_f64();
                let qv = self.nodes[q.0].data[i * cols + j].to_f64().max(KL_EPS);
                if pv > 0.0 {
                    row_sum += pv * (pv.ln() - qv.ln());
                }
            }
            if any {
                valid_rows += 1;
                total += row_sum;
            }
        }
        if valid_rows == 0 {
            return Err(TensorError::DegenerateBatch("kl_rows"));
        }
        let rg = self.rg(&[q.0]);
        Ok(self.push(
            vec![F::from_f64(total / valid_rows as f64)],
            vec![1],
            rg,
            Op::KlRows {
                p: p.0,
                q: q.0,
                mask,
            },
        ))
    }

    /// Mean over unmasked rows of `-sum_v softmax(teacher) * log softmax(student)`.
    /// The teacher branch is gradient-stopped.
    pub fn soft_cross_entropy(
        &mut self,
        student: TensorId,
        teacher: TensorId,
        row_mask: Option<Mask>,
    ) -> Result<TensorId> {
        if self.nodes[student.0].shape != self.nodes[teacher.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "soft_cross_entropy",
                lhs: self.nodes[student.0].shape.clone(),
                rhs: self.nodes[teacher.0].shape.clone(),
            });
        }
        let (rows, cols) = self.as_matrix(student);
        if let Some(m) = &row_mask {
            if m.len() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "soft_cross_entropy",
                    lhs: vec![rows],
                    rhs: vec![m.len()],
                });
            }
        }
        let mut total = 0.0;
        let mut valid = 0usize;
        for i in 0..rows {
            if !row_mask.as_ref().is_none_or(|m| m[i]) {
                continue;
            }
            valid += 1;
            let t_row = log_softmax_f64(&self.nodes[teacher.0].data[i * cols..(i + 1) * cols]);
            let s_row = log_softmax_f64(&self.nodes[student.0].data[i * cols..(i + 1) * cols]);
            for j in 0..cols {
                total -= t_row[j].exp() * s_row[j];
            }
        }
        if valid == 0 {
            return Err(TensorError::DegenerateBatch("soft_cross_entropy"));
        }
        let rg = self.rg(&[student.0]);
        Ok(self.push(
            vec![F::from_f64(total / valid as f64)],
            vec![1],
            rg,
            Op::SoftCrossEntropy {
                student: student.0,
                teacher: teacher.0,
                row_mask,
            },
        ))
    }

    /// Mean `-log softmax(logits)[target]` over rows with non-negative target.
    pub fn token_cross_entropy(&mut self, logits: TensorId, targets: &[i64]) -> Result<TensorId> {
        let (rows, cols) = self.as_matrix(logits);
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "token_cross_entropy",
                lhs: vec![rows],
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        let mut valid = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            if t as usize >= cols {
                return Err(TensorError::InvalidArgument(format!(
                    "target {t} out of vocab range {cols}"
                )));
            }
            valid += 1;
            let lsm = log_softmax_f64(&self.nodes[logits.0].data[i * cols..(i + 1) * cols]);
            total -= lsm[t as usize];
        }
        if valid == 0 {
            return Err(TensorError::DegenerateBatch("token_cross_entropy"));
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            vec![F::from_f64(total / valid as f64)],
            vec![1],
            rg,
            Op::TokenCrossEntropy {
                logits: logits.0,
                targets: Arc::new(targets.to_vec()),
            },
        ))
    }

    /// Mean of scalar tensors (convenience for batch averaging).
    pub fn mean_of(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument("mean_of zero tensors".into()));
        }
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id)?;
        }
        Ok(self.scale(acc, 1.0 / ids.len() as f64))
    }

    fn accumulate(&mut self, idx: usize, contrib: &[F]) {
        let node = &mut self.nodes[idx];
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi = F::from_f64(gi.to_f64() + ci.to_f64());
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Repeated calls accumulate
    /// into existing grads; callers wanting fresh grads use a fresh tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        // only leaf grads persist across sweeps; intermediate grads are
        // per-sweep scratch and would double-propagate if kept
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        self.accumulate(loss.0, &[F::ONE]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backward_node(idx, &grad, &op);
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, dy: &[F], op: &Op) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].requires_grad {
                    // dA = dC . B^T
                    let mut da = vec![F::ZERO; m * k];
                    F::gemm(m, n, k, 1.0, dy, false, &self.nodes[*b].data, true, 0.0, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.nodes[*b].requires_grad {
                    // dB = A^T . dC
                    let mut db = vec![F::ZERO; k * n];
                    F::gemm(k, m, n, 1.0, &self.nodes[*a].data, true, dy, false, 0.0, &mut db);
                    self.accumulate(*b, &db);
                }
            }
            Op::Add { a, b } => {
                if self.nodes[*a].requires_grad {
                    self.accumulate(*a, dy);
                }
                if self.nodes[*b].requires_grad {
                    self.accumulate(*b, dy);
                }
            }
            Op::Mul { a, b } => {
                for (x, other) in [(*a, *b), (*b, *a)] {
                    if self.nodes[x].requires_grad {
                        let d: Vec<F> = dy
                            .iter()
                            .zip(&self.nodes[other].data)
                            .map(|(&g, &o)| F::from_f64(g.to_f64() * o.to_f64()))
                            .collect();
                        self.accumulate(x, &d);
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[*a].requires_grad {
                    let d: Vec<F> = dy.iter().map(|&g| F::from_f64(g.to_f64() * c)).collect();
                    self.accumulate(*a, &d);
                }
            }
            Op::Transpose { a } => {
                if self.nodes[*a].requires_grad {
                    let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    // dy has shape [c x r]
                    let mut d = vec![F::ZERO; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            d[j * c + i] = dy[i * r + j];
                        }
                    }
                    self.accumulate(*a, &d);
                }
            }
            Op::Reshape { a } => {
                if self.nodes[*a].requires_grad {
                    self.accumulate(*a, dy);
                }
            }
            Op::SliceCols { a, start, width } => {
                if self.nodes[*a].requires_grad {
                    let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let mut d = vec![F::ZERO; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + width]
                            .copy_from_slice(&dy[i * width..(i + 1) * width]);
                    }
                    self.accumulate(*a, &d);
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.nodes[parts[0]].shape[0];
                let total_cols: usize = parts.iter().map(|&p| self.nodes[p].shape[1]).sum();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].shape[1];
                    if self.nodes[p].requires_grad {
                        let mut d = vec![F::ZERO; rows * c];
                        for i in 0..rows {
                            d[i * c..(i + 1) * c]
                                .copy_from_slice(&dy[i * total_cols + offset..i * total_cols + offset + c]);
                        }
                        self.accumulate(p, &d);
                    }
                    offset += c;
                }
            }
            Op::Gelu { a } => {
                if self.nodes[*a].requires_grad {
                    let d: Vec<F> = dy
                        .iter()
                        .zip(&self.nodes[*a].data)
                        .map(|(&g, &x)| F::from_f64(g.to_f64() * gelu_deriv(x.to_f64())))
                        .collect();
                    self.accumulate(*a, &d);
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (rows, cols) = {
                    let s = &self.nodes[*x].shape;
                    let c = *s.last().unwrap();
                    (self.nodes[*x].data.len() / c, c)
                };
                let mut dx = vec![F::ZERO; rows * cols];
                let mut dgain = vec![0.0f64; cols];
                let mut dbias = vec![0.0f64; cols];
                for i in 0..rows {
                    let row: Vec<f64> = self.nodes[*x].data[i * cols..(i + 1) * cols]
                        .iter()
                        .map(|v| v.to_f64())
                        .collect();
                    let (mean, rstd) = row_moments(&self.nodes[*x].data[i * cols..(i + 1) * cols]);
                    let mut sum_dg = 0.0;
                    let mut sum_dgx = 0.0;
                    let mut xhat = vec![0.0f64; cols];
                    let mut dyg = vec![0.0f64; cols];
                    for j in 0..cols {
                        xhat[j] = (row[j] - mean) * rstd;
                        let g = dy[i * cols + j].to_f64();
                        dyg[j] = g * self.nodes[*gain].data[j].to_f64();
                        sum_dg += dyg[j];
                        sum_dgx += dyg[j] * xhat[j];
                        dgain[j] += g * xhat[j];
                        dbias[j] += g;
                    }
                    let inv = 1.0 / cols as f64;
                    for j in 0..cols {
                        let v = rstd * (dyg[j] - sum_dg * inv - xhat[j] * sum_dgx * inv);
                        dx[i * cols + j] = F::from_f64(v);
                    }
                }
                if self.nodes[*x].requires_grad {
                    self.accumulate(*x, &dx);
                }
                if self.nodes[*gain].requires_grad {
                    let d: Vec<F> = dgain.iter().map(|&v| F::from_f64(v)).collect();
                    self.accumulate(*gain, &d);
                }
                if self.nodes[*bias].requires_grad {
                    let d: Vec<F> = dbias.iter().map(|&v| F::from_f64(v)).collect();
                    self.accumulate(*bias, &d);
                }
            }
            Op::SoftmaxRows { x, mask } => {
                if self.nodes[*x].requires_grad {
                    let cols = *self.nodes[*x].shape.last().unwrap();
                    let rows = self.nodes[*x].data.len() / cols;
                    let y = &self.nodes[idx].data;
                    let mut dx = vec![F::ZERO; rows * cols];
                    for i in 0..rows {
                        let entry_ok = |j: usize| mask.as_ref().is_none_or(|m| m[i * cols + j]);
                        let mut dot = 0.0;
                        for j in 0..cols {
                            if entry_ok(j) {
                                dot += dy[i * cols + j].to_f64() * y[i * cols + j].to_f64();
                            }
                        }
                        for j in 0..cols {
                            if entry_ok(j) {
                                let v = (dy[i * cols + j].to_f64() - dot) * y[i * cols + j].to_f64();
                                dx[i * cols + j] = F::from_f64(v);
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Sum { a } => {
                if self.nodes[*a].requires_grad {
                    let g = dy[0];
                    let d = vec![g; self.nodes[*a].data.len()];
                    self.accumulate(*a, &d);
                }
            }
            Op::Embedding { table, ids } => {
                if self.nodes[*table].requires_grad {
                    let d_cols = self.nodes[*table].shape[1];
                    let mut d = vec![F::ZERO; self.nodes[*table].data.len()];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d_cols {
                            let cur = d[id * d_cols + j].to_f64();
                            d[id * d_cols + j] = F::from_f64(cur + dy[i * d_cols + j].to_f64());
                        }
                    }
                    self.accumulate(*table, &d);
                }
            }
            Op::KlRows { p, q, mask } => {
                if self.nodes[*q].requires_grad {
                    let cols = *self.nodes[*q].shape.last().unwrap();
                    let rows = self.nodes[*q].data.len() / cols;
                    let mut valid_rows = 0usize;
                    let mut row_any = vec![false; rows];
                    for i in 0..rows {
                        let any = (0..cols)
                            .any(|j| mask.as_ref().is_none_or(|m| m[i * cols + j]));
                        row_any[i] = any;
                        if any {
                            valid_rows += 1;
                        }
                    }
                    let scale = dy[0].to_f64() / valid_rows as f64;
                    let mut d = vec![F::ZERO; rows * cols];
                    for i in 0..rows {
                        if !row_any[i] {
                            continue;
                        }
                        for j in 0..cols {
                            if !mask.as_ref().is_none_or(|m| m[i * cols + j]) {
                                continue;
                            }
                            let pv = self.nodes[*p].data[i * cols + j].to_f64();
                            let qv = self.nodes[*q].data[i * cols + j].to_f64();
                            // clamped q below eps has zero local derivative
                            if pv > 0.0 && qv >= KL_EPS {
                                d[i * cols + j] = F::from_f64(-scale * pv / qv);
                            }
                        }
                    }
                    self.accumulate(*q, &d);
                }
            }
            Op::SoftCrossEntropy {
                student,
                teacher,
                row_mask,
            } => {
                if self.nodes[*student].requires_grad {
                    let cols = *self.nodes[*student].shape.last().unwrap();
                    let rows = self.nodes[*student].data.len() / cols;
                    let valid = (0..rows)
                        .filter(|&i| row_mask.as_ref().is_none_or(|m| m[i]))
                        .count();
                    let scale = dy[0].to_f64() / valid as f64;
                    let mut d = vec![F::ZERO; rows * cols];
                    for i in 0..rows {
                        if !row_mask.as_ref().is_none_or(|m| m[i]) {
                            continue;
                        }
                        let s_lsm =
                            log_softmax_f64(&self.nodes[*student].data[i * cols..(i + 1) * cols]);
                        let t_lsm =
                            log_softmax_f64(&self.nodes[*teacher].data[i * cols..(i + 1) * cols]);
                        for j in 0..cols {
                            d[i * cols + j] =
                                F::from_f64(scale * (s_lsm[j].exp() - t_lsm[j].exp()));
                        }
                    }
                    self.accumulate(*student, &d);
                }
            }
            Op::TokenCrossEntropy { logits, targets } => {
                if self.nodes[*logits].requires_grad {
                    let cols = *self.nodes[*logits].shape.last().unwrap();
                    let rows = self.nodes[*logits].data.len() / cols;
                    let valid = targets.iter().filter(|&&t| t >= 0).count();
                    let scale = dy[0].to_f64() / valid as f64;
                    let mut d = vec![F::ZERO; rows * cols];
                    for (i, &t) in targets.iter().enumerate() {
                        if t < 0 {
                            continue;
                        }
                        let lsm =
                            log_softmax_f64(&self.nodes[*logits].data[i * cols..(i + 1) * cols]);
                        for j in 0..cols {
                            let onehot = if j == t as usize { 1.0 } else { 0.0 };
                            d[i * cols + j] = F::from_f64(scale * (lsm[j].exp() - onehot));
                        }
                    }
                    self.accumulate(*logits, &d);
                }
            }
        }
    }
}

fn row_moments<F: Scalar>(row: &[F]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|v| {
            let d = v.to_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn log_softmax_f64<F: Scalar>(row: &[F]) -> Vec<f64> {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|v| (v.to_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row.iter().map(|v| v.to_f64() - lse).collect()
}

// tanh-approximate GELU
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}
