//! Dense f64 tensors and a reverse-mode autodiff tape.
//!
//! A [`Tape`] is a flat arena of nodes in topological order: every op's
//! inputs precede it, so one reverse sweep propagates gradients and visits
//! each node exactly once. Values are immutable once recorded; only grad
//! buffers are written during [`Tape::backward`]. Distinct tapes share
//! nothing and may live on distinct threads.
//!
//! Storage is row-major, 64-bit throughout. Broadcasting is limited to
//! bias-add and per-row ops, which is all a small transformer needs.
//! Softmax subtracts the row max and cross-entropy goes through
//! log-sum-exp; neither is optional.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    ShapeLen { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("axis {axis} invalid for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },
    #[error("softmax query row {row} has every key masked")]
    FullyMaskedRow { row: usize },
    #[error("cross entropy: every target position is ignored")]
    AllPositionsIgnored,
    #[error("cross entropy: target id {id} outside vocab of size {vocab}")]
    TargetOutOfRange { id: i64, vocab: usize },
    #[error("{op}: column range {start}..{end} outside width {width}")]
    ColumnRange {
        op: &'static str,
        start: usize,
        end: usize,
        width: usize,
    },
    #[error("gather: row {row} outside table with {rows} rows")]
    GatherRow { row: usize, rows: usize },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
}

// ── Tensor ───────────────────────────────────────────────────────────

/// Dense row-major f64 array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeLen {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Row-major matrix from nested rows; all rows must share a width.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "matrix",
                    lhs: vec![r, c],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    /// Seeded Gaussian init.
    pub fn randn<R: Rng>(shape: Vec<usize>, mean: f64, std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(mean, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    /// a[m,k] · b[n,k]ᵀ -> [m,n]
    MatMulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// x[n,d] + bias[d] broadcast over rows
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    /// Row softmax with some entries pinned to probability 0. Backward needs
    /// no mask: pinned outputs are exactly 0, which zeroes their gradient.
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    /// Mean NLL over non-ignored targets; cached probs for backward.
    CrossEntropy {
        logits: Var,
        targets: Vec<i64>,
        ignore_id: i64,
        probs: Vec<f64>,
        n_active: usize,
    },
    /// Rows of `table` selected by token id.
    Gather { table: Var, ids: Vec<u32> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    /// Scalar Σ cᵢ·xᵢ over scalar inputs.
    WeightedSum { parts: Vec<(Var, f64)> },
    /// Inverted-scale dropout; mask entries are 0 or 1/keep.
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Arena of recorded operations. Nodes are appended in execution order,
/// which is already a topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => unreachable!("rank checked by callers"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a tensor as a leaf. Gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copy a node out as a standalone tensor (grad included when present).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: n.needs_grad,
            grad: n.grad.clone(),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.value.iter().all(|v| v.is_finite()))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::BadRank {
                op,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let crow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += aip * brow[j];
                    }
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, ng, Op::MatMul { a, b }))
    }

    /// a[m,k] · b[n,k]ᵀ. Used for QKᵀ scores and the weight-tied output head.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.rank2("matmul_nt", a)?;
        let (n, k2) = self.rank2("matmul_nt", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bv[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for p in 0..k {
                        s += arow[p] * brow[p];
                    }
                    out[i * n + j] = s;
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, ng, Op::MatMulNT { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, ng, Op::Add { a, b }))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, d) = rows_cols(self.shape(x));
        let bs = self.shape(bias);
        if bs.len() != 1 || bs[0] != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let bv = self.nodes[bias.0].value.clone();
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % d])
            .collect();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(self.nodes[x.0].shape.clone(), value, ng, Op::AddBias { x, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, ng, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), value, ng, Op::Scale { x, c })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| gelu_fwd(v)).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), value, ng, Op::Gelu { x })
    }

    /// Max-stabilized softmax along `axis` (rank ≤ 2).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() > 2 || axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, shape });
        }
        let (rows, cols) = rows_cols(&shape);
        let xv = self.value(x);
        let mut value = vec![0.0; xv.len()];
        if shape.len() == 1 || axis == 1 {
            for i in 0..rows {
                softmax_row(&xv[i * cols..(i + 1) * cols], &mut value[i * cols..(i + 1) * cols]);
            }
        } else {
            // axis 0 of a matrix: softmax down each column
            let mut col = vec![0.0; rows];
            let mut out = vec![0.0; rows];
            for j in 0..cols {
                for i in 0..rows {
                    col[i] = xv[i * cols + j];
                }
                softmax_row(&col, &mut out);
                for i in 0..rows {
                    value[i * cols + j] = out[i];
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(shape, value, ng, Op::Softmax { x, axis }))
    }

    /// Row softmax over the unmasked entries only; masked outputs are exactly 0.
    /// Errors when some row has no unmasked entry, so no −∞ ever enters a value.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let (rows, cols) = self.rank2("masked_softmax", x)?;
        if mask.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: vec![rows, cols],
                rhs: vec![mask.len()],
            });
        }
        for i in 0..rows {
            if !mask[i * cols..(i + 1) * cols].iter().any(|&m| m) {
                return Err(TensorError::FullyMaskedRow { row: i });
            }
        }
        let xv = self.value(x);
        let mut value = vec![0.0; xv.len()];
        for i in 0..rows {
            let xr = &xv[i * cols..(i + 1) * cols];
            let mr = &mask[i * cols..(i + 1) * cols];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..cols {
                if mr[j] && xr[j] > mx {
                    mx = xr[j];
                }
            }
            let mut sum = 0.0;
            let vr = &mut value[i * cols..(i + 1) * cols];
            for j in 0..cols {
                if mr[j] {
                    vr[j] = (xr[j] - mx).exp();
                    sum += vr[j];
                }
            }
            for v in vr.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![rows, cols], value, ng, Op::MaskedSoftmax { x }))
    }

    /// Per-row standardization to zero mean / unit variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() > 2 {
            return Err(TensorError::BadRank {
                op: "layer_norm",
                expected: 2,
                shape,
            });
        }
        let (rows, d) = rows_cols(&shape);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let xv = self.value(x);
        let gv = self.nodes[gain.0].value.clone();
        let bv = self.nodes[bias.0].value.clone();
        let mut value = vec![0.0; xv.len()];
        for i in 0..rows {
            let xr = &xv[i * d..(i + 1) * d];
            let (mean, rstd) = row_norm_stats(xr, eps);
            let vr = &mut value[i * d..(i + 1) * d];
            for j in 0..d {
                vr[j] = (xr[j] - mean) * rstd * gv[j] + bv[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            value,
            ng,
            Op::LayerNorm { x, gain, bias, eps },
        ))
    }

    /// Mean negative log-likelihood over targets not equal to `ignore_id`,
    /// computed through log-sum-exp.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore_id: i64,
    ) -> Result<Var, TensorError> {
        let (n, vocab) = self.rank2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, vocab],
                rhs: vec![targets.len()],
            });
        }
        let xv = self.value(logits);
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        let mut n_active = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore_id {
                continue;
            }
            if t < 0 || t as usize >= vocab {
                return Err(TensorError::TargetOutOfRange { id: t, vocab });
            }
            let row = &xv[i * vocab..(i + 1) * vocab];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let pr = &mut probs[i * vocab..(i + 1) * vocab];
            for j in 0..vocab {
                pr[j] = (row[j] - mx).exp();
                sum += pr[j];
            }
            for p in pr.iter_mut() {
                *p /= sum;
            }
            let lse = mx + sum.ln();
            total += lse - row[t as usize];
            n_active += 1;
        }
        if n_active == 0 {
            return Err(TensorError::AllPositionsIgnored);
        }
        let loss = total / n_active as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            ng,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_id,
                probs,
                n_active,
            },
        ))
    }

    /// Select rows of a `[rows, d]` table by id; backward scatter-adds.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let (rows, d) = self.rank2("gather", table)?;
        let mut value = Vec::with_capacity(ids.len() * d);
        {
            let tv = self.value(table);
            for &id in ids {
                let id = id as usize;
                if id >= rows {
                    return Err(TensorError::GatherRow { row: id, rows });
                }
                value.extend_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        let ng = self.needs(table);
        Ok(self.push(vec![ids.len(), d], value, ng, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.rank2("slice_cols", x)?;
        if start + len > cols || len == 0 {
            return Err(TensorError::ColumnRange {
                op: "slice_cols",
                start,
                end: start + len,
                width: cols,
            });
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(rows * len);
        for i in 0..rows {
            value.extend_from_slice(&xv[i * cols + start..i * cols + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![rows, len], value, ng, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        let (rows, _) = self.rank2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rank2("concat_cols", p)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p);
                value.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, total], value, ng, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s], ng, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(x);
        self.push(vec![1], vec![m], ng, Op::Mean { x })
    }

    /// Scalar combination Σ cᵢ·xᵢ of scalar nodes, e.g. a token-weighted batch loss.
    pub fn weighted_sum(&mut self, parts: &[(Var, f64)]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "weighted_sum" });
        }
        let mut s = 0.0;
        for &(v, c) in parts {
            if self.value(v).len() != 1 {
                return Err(TensorError::LossNotScalar {
                    shape: self.shape(v).to_vec(),
                });
            }
            s += c * self.value(v)[0];
        }
        let ng = parts.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(vec![1], vec![s], ng, Op::WeightedSum { parts: parts.to_vec() }))
    }

    /// Inverted-scale dropout with an externally seeded RNG. `rate == 0` is identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = self
            .value(x)
            .iter()
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let value = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), value, ng, Op::Dropout { x, mask })
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients land on every node with
    /// `needs_grad`, readable via [`Tape::grad`]. Calling it again resets
    /// and recomputes, so repeated runs are bit-identical.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::LossNotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            self.propagate(id, &g);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        if self.nodes[v.0].grad.is_none() {
            let n = self.nodes[v.0].value.len();
            self.nodes[v.0].grad = Some(vec![0.0; n]);
        }
        let mut g = self.nodes[v.0].grad.take().unwrap();
        contrib(&mut g);
        self.nodes[v.0].grad = Some(g);
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Ops only read values of nodes with smaller index, so cloning the
        // needed slices keeps the borrow checker happy without aliasing risk.
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.acc(a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gij * bv[p * n + j];
                            }
                        }
                    }
                });
                self.acc(b, |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            &Op::MatMulNT { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.acc(a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gij * bv[j * k + p];
                            }
                        }
                    }
                });
                self.acc(b, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                gb[j * k + p] += gij * av[i * k + p];
                            }
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                self.acc(a, |ga| {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
                self.acc(b, |gb| {
                    for (x, gi) in gb.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
            }
            &Op::AddBias { x, bias } => {
                let d = self.shape(bias)[0];
                self.acc(x, |gx| {
                    for (v, gi) in gx.iter_mut().zip(g) {
                        *v += gi;
                    }
                });
                self.acc(bias, |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.acc(a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.acc(b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            &Op::Scale { x, c } => {
                self.acc(x, |gx| {
                    for (v, gi) in gx.iter_mut().zip(g) {
                        *v += c * gi;
                    }
                });
            }
            &Op::Gelu { x } => {
                let xv = self.nodes[x.0].value.clone();
                self.acc(x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_bwd(xv[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let x = *x;
                let axis = *axis;
                let y = self.nodes[id].value.clone();
                let shape = self.nodes[id].shape.clone();
                let (rows, cols) = rows_cols(&shape);
                self.acc(x, |gx| {
                    if shape.len() == 1 || axis == 1 {
                        for i in 0..rows {
                            let yr = &y[i * cols..(i + 1) * cols];
                            let gr = &g[i * cols..(i + 1) * cols];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..cols {
                                gx[i * cols + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    } else {
                        for j in 0..cols {
                            let mut dot = 0.0;
                            for i in 0..rows {
                                dot += y[i * cols + j] * g[i * cols + j];
                            }
                            for i in 0..rows {
                                gx[i * cols + j] += y[i * cols + j] * (g[i * cols + j] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x } => {
                let x = *x;
                let y = self.nodes[id].value.clone();
                let shape = self.nodes[id].shape.clone();
                let (rows, cols) = (shape[0], shape[1]);
                self.acc(x, |gx| {
                    for i in 0..rows {
                        let yr = &y[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            // masked entries have y == 0, so they contribute 0
                            gx[i * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            &Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gain.0].value.clone();
                let shape = self.nodes[id].shape.clone();
                let (rows, d) = rows_cols(&shape);
                self.acc(gain, |gg| {
                    for i in 0..rows {
                        let xr = &xv[i * d..(i + 1) * d];
                        let (mean, rstd) = row_norm_stats(xr, eps);
                        for j in 0..d {
                            gg[j] += g[i * d + j] * (xr[j] - mean) * rstd;
                        }
                    }
                });
                self.acc(bias, |gb| {
                    for i in 0..rows {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                });
                self.acc(x, |gx| {
                    for i in 0..rows {
                        let xr = &xv[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let (mean, rstd) = row_norm_stats(xr, eps);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            let dxhat = gr[j] * gv[j];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            let dxhat = gr[j] * gv[j];
                            gx[i * d + j] += rstd * (dxhat - m1 - xhat * m2);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_id,
                probs,
                n_active,
            } => {
                let logits = *logits;
                let up = g[0] / *n_active as f64;
                let targets = targets.clone();
                let ignore = *ignore_id;
                let probs = probs.clone();
                let vocab = self.shape(logits)[1];
                self.acc(logits, |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        if t == ignore {
                            continue;
                        }
                        let pr = &probs[i * vocab..(i + 1) * vocab];
                        let base = i * vocab;
                        for j in 0..vocab {
                            gl[base + j] += up * pr[j];
                        }
                        gl[base + t as usize] -= up;
                    }
                });
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.shape(table)[1];
                self.acc(table, |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &g[row * d..(row + 1) * d];
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    }
                });
            }
            &Op::SliceCols { x, start, len } => {
                let cols = self.shape(x)[1];
                let rows = self.shape(x)[0];
                self.acc(x, |gx| {
                    for i in 0..rows {
                        for j in 0..len {
                            gx[i * cols + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let rows = self.nodes[id].shape[0];
                let total = self.nodes[id].shape[1];
                let mut offset = 0usize;
                for p in parts {
                    let w = self.shape(p)[1];
                    let off = offset;
                    self.acc(p, |gp| {
                        for i in 0..rows {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            &Op::Sum { x } => {
                let g0 = g[0];
                self.acc(x, |gx| {
                    for v in gx.iter_mut() {
                        *v += g0;
                    }
                });
            }
            &Op::Mean { x } => {
                let n = self.nodes[x.0].value.len() as f64;
                let g0 = g[0] / n;
                self.acc(x, |gx| {
                    for v in gx.iter_mut() {
                        *v += g0;
                    }
                });
            }
            Op::WeightedSum { parts } => {
                let parts = parts.clone();
                let g0 = g[0];
                for (v, c) in parts {
                    self.acc(v, |gv| {
                        gv[0] += g0 * c;
                    });
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                self.acc(x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                });
            }
        }
    }
}

// ── kernels ──────────────────────────────────────────────────────────

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn row_norm_stats(x: &[f64], eps: f64) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
