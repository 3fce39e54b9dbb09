//! Dynamic Wengert tape: eager forward evaluation, reverse-mode backward.
//!
//! Ops append nodes referencing earlier [`VarId`]s, so node order is already
//! a topological order and `backward` is a single reverse sweep. Nodes that
//! cannot reach a differentiable leaf are flagged at construction and skipped
//! during the sweep, which keeps frozen-weight subgraphs cheap.

use super::{DiffError, Tensor, NORM_EPSILON};

/// Index of a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

enum Op {
    Leaf,
    Add(VarId, VarId),
    Neg(VarId),
    Exp(VarId),
    Scale(VarId, f32),
    Mul(VarId, VarId),
    MatMul(VarId, VarId),
    MatMulNT(VarId, VarId),
    AddRow(VarId, VarId),
    Relu(VarId),
    L2Normalize { x: VarId, inv_norms: Vec<f32> },
    SetMaxPool { x: VarId, argmax: Vec<usize> },
    SoftmaxCrossEntropy { logits: VarId, labels: Vec<usize>, probs: Vec<f32> },
    ConcatRows(VarId, VarId),
    StackRows(Vec<VarId>),
    MeanRows(VarId),
    GatherRows { x: VarId, indices: Vec<usize> },
    Transpose(VarId),
    Sum(VarId),
    Dot(VarId, VarId),
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when this node can reach a requires-grad leaf.
    track: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`. `None` for values that do
    /// not influence the root or are not on a differentiable path.
    pub fn wrt(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Dynamic tape; all ops validate shapes and evaluate eagerly.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ── matrix kernels ──────────────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n]
fn mm(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ
fn mm_nt(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
fn mm_tn(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Shape viewed as a matrix: scalars are 1×1, vectors 1×d.
fn as_mat(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [d] => (1, *d),
        [r, c] => (*r, *c),
        _ => unreachable!("tensors are rank ≤ 2"),
    }
}

fn require_mat(op: &'static str, t: &Tensor) -> Result<(usize, usize), DiffError> {
    t.dims2().ok_or_else(|| DiffError::RankMismatch {
        op,
        want: "rank-2 tensor",
        got: t.shape().to_vec(),
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, track: bool) -> VarId {
        self.nodes.push(Node { value, op, track });
        VarId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: VarId) -> bool {
        self.nodes[id.0].track
    }

    /// Records `t` as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        let track = t.requires_grad();
        self.push(t, Op::Leaf, track)
    }

    /// Records a non-differentiable leaf regardless of the grad flag.
    pub fn constant(&mut self, mut t: Tensor) -> VarId {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    // ── elementwise ─────────────────────────────────────────────────────────

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("shape checked");
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), track))
    }

    /// Elementwise negation.
    pub fn neg(&mut self, x: VarId) -> VarId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| -v).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let track = self.tracked(x);
        self.push(value, Op::Neg(x), track)
    }

    /// Elementwise `exp`.
    pub fn exp(&mut self, x: VarId) -> VarId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let track = self.tracked(x);
        self.push(value, Op::Exp(x), track)
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, x: VarId, c: f32) -> VarId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let track = self.tracked(x);
        self.push(value, Op::Scale(x, c), track)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("shape checked");
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), track))
    }

    /// Elementwise max(x, 0).
    pub fn relu(&mut self, x: VarId) -> VarId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let track = self.tracked(x);
        self.push(value, Op::Relu(x), track)
    }

    // ── linear algebra ──────────────────────────────────────────────────────

    /// `a · b` where `a` is `[m,k]` (or a `[k]` vector, read as `[1,k]`) and
    /// `b` is `[k,n]`. A vector lhs yields a vector `[n]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (kb, n) = require_mat("matmul", tb)?;
        let (m, ka) = as_mat(ta.shape());
        if ta.shape().is_empty() || ka != kb {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = mm(ta.data(), m, ka, tb.data(), n);
        let shape = if ta.shape().len() == 1 { vec![n] } else { vec![m, n] };
        let value = Tensor::new(shape, data).expect("sized by kernel");
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), track))
    }

    /// `a · bᵀ` where `a` is `[m,k]` (or `[k]`) and `b` is `[n,k]`.
    /// The workhorse for similarity matrices between embedding rows.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, kb) = require_mat("matmul_nt", tb)?;
        let (m, ka) = as_mat(ta.shape());
        if ta.shape().is_empty() || ka != kb {
            return Err(DiffError::ShapeMismatch {
                op: "matmul_nt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = mm_nt(ta.data(), m, ka, tb.data(), n);
        let shape = if ta.shape().len() == 1 { vec![n] } else { vec![m, n] };
        let value = Tensor::new(shape, data).expect("sized by kernel");
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMulNT(a, b), track))
    }

    /// Broadcast row add: `[n,d] + [d]`.
    pub fn add_row(&mut self, a: VarId, b: VarId) -> Result<VarId, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, d) = require_mat("add_row", ta)?;
        if tb.shape() != [d] {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![n, d], data).expect("same shape");
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::AddRow(a, b), track))
    }

    /// `[n,d] → [d,n]`.
    pub fn transpose(&mut self, x: VarId) -> Result<VarId, DiffError> {
        let t = self.value(x);
        let (n, d) = require_mat("transpose", t)?;
        let src = t.data();
        let mut data = vec![0.0f32; n * d];
        for i in 0..n {
            for j in 0..d {
                data[j * n + i] = src[i * d + j];
            }
        }
        let value = Tensor::new(vec![d, n], data).expect("sized");
        let track = self.tracked(x);
        Ok(self.push(value, Op::Transpose(x), track))
    }

    /// Dot product of two equal-length vectors, yielding a scalar.
    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        match (ta.shape(), tb.shape()) {
            ([da], [db]) if da == db => {}
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "dot",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                })
            }
        }
        let v = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), track))
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let v = self.value(x).data().iter().sum();
        let track = self.tracked(x);
        self.push(Tensor::scalar(v), Op::Sum(x), track)
    }

    // ── row structure ───────────────────────────────────────────────────────

    /// Concatenates two row matrices with matching widths: `[n,d] ⧺ [m,d]`.
    pub fn concat_rows(&mut self, a: VarId, b: VarId) -> Result<VarId, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, d) = require_mat("concat_rows", ta)?;
        let (m, d2) = require_mat("concat_rows", tb)?;
        if d != d2 {
            return Err(DiffError::ShapeMismatch {
                op: "concat_rows",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity((n + m) * d);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let value = Tensor::new(vec![n + m, d], data).expect("sized");
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::ConcatRows(a, b), track))
    }

    /// Stacks `n` equal-length vectors into an `[n,d]` matrix.
    pub fn stack_rows(&mut self, rows: &[VarId]) -> Result<VarId, DiffError> {
        let Some(&first) = rows.first() else {
            return Err(DiffError::EmptySet);
        };
        let d = match self.value(first).shape() {
            [d] => *d,
            other => {
                return Err(DiffError::RankMismatch {
                    op: "stack_rows",
                    want: "rank-1 rows",
                    got: other.to_vec(),
                })
            }
        };
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut track = false;
        for &r in rows {
            let t = self.value(r);
            if t.shape() != [d] {
                return Err(DiffError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            track |= self.tracked(r);
        }
        let value = Tensor::new(vec![rows.len(), d], data).expect("sized");
        Ok(self.push(value, Op::StackRows(rows.to_vec()), track))
    }

    /// Mean over rows: `[n,d] → [d]`.
    pub fn mean_rows(&mut self, x: VarId) -> Result<VarId, DiffError> {
        let t = self.value(x);
        let (n, d) = require_mat("mean_rows", t)?;
        if n == 0 {
            return Err(DiffError::EmptySet);
        }
        let mut data = vec![0.0f32; d];
        for row in t.data().chunks(d) {
            for (o, &v) in data.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f32;
        for v in &mut data {
            *v *= inv;
        }
        let track = self.tracked(x);
        Ok(self.push(Tensor::vector(data), Op::MeanRows(x), track))
    }

    /// Selects rows by index (duplicates allowed): `[n,d] → [k,d]`.
    pub fn gather_rows(&mut self, x: VarId, indices: &[usize]) -> Result<VarId, DiffError> {
        let t = self.value(x);
        let (n, d) = require_mat("gather_rows", t)?;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(DiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    rows: n,
                });
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], data).expect("sized");
        let track = self.tracked(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            track,
        ))
    }

    // ── reductions with custom backward ─────────────────────────────────────

    /// Row-wise L2 normalization. Rank-1 input is treated as a single row.
    /// Errors with [`DiffError::DegenerateNorm`] when any row norm is below
    /// [`NORM_EPSILON`].
    pub fn l2_normalize(&mut self, x: VarId) -> Result<VarId, DiffError> {
        let t = self.value(x);
        let (rows, d) = match t.shape() {
            [d] => (1usize, *d),
            [r, c] => (*r, *c),
            other => {
                return Err(DiffError::RankMismatch {
                    op: "l2_normalize",
                    want: "rank-1 or rank-2 tensor",
                    got: other.to_vec(),
                })
            }
        };
        let mut data = t.data().to_vec();
        let mut inv_norms = Vec::with_capacity(rows);
        for (row_idx, row) in data.chunks_mut(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm < NORM_EPSILON {
                return Err(DiffError::DegenerateNorm { row: row_idx, norm });
            }
            let inv = 1.0 / norm;
            for v in row.iter_mut() {
                *v *= inv;
            }
            inv_norms.push(inv);
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let track = self.tracked(x);
        Ok(self.push(value, Op::L2Normalize { x, inv_norms }, track))
    }

    /// Column-wise max over set rows: `[n,d] → [d]`. Permutation-invariant;
    /// ties resolve to the lowest row index (strict `>` scan order).
    pub fn set_max_pool(&mut self, x: VarId) -> Result<VarId, DiffError> {
        let t = self.value(x);
        let (n, d) = require_mat("set_max_pool", t)?;
        if n == 0 {
            return Err(DiffError::EmptySet);
        }
        let src = t.data();
        let mut best = src[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for i in 1..n {
            let row = &src[i * d..(i + 1) * d];
            for j in 0..d {
                if row[j] > best[j] {
                    best[j] = row[j];
                    argmax[j] = i;
                }
            }
        }
        let track = self.tracked(x);
        Ok(self.push(Tensor::vector(best), Op::SetMaxPool { x, argmax }, track))
    }

    /// Mean softmax cross-entropy over rows of `[b,c]` logits against integer
    /// labels; numerically stabilized by per-row max subtraction.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: VarId,
        labels: &[usize],
    ) -> Result<VarId, DiffError> {
        let t = self.value(logits);
        let (b, c) = require_mat("softmax_cross_entropy", t)?;
        if labels.len() != b {
            return Err(DiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vec![b, c],
                rhs: vec![labels.len()],
            });
        }
        let src = t.data();
        let mut probs = vec![0.0f32; b * c];
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(DiffError::LabelOutOfRange {
                    row: i,
                    label,
                    classes: c,
                });
            }
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            let prow = &mut probs[i * c..(i + 1) * c];
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            let inv = 1.0 / denom;
            for p in prow.iter_mut() {
                *p *= inv;
            }
            // -log p_label, computed from the stabilized pieces.
            total += f64::from(denom.ln() - (row[label] - max));
        }
        let value = Tensor::scalar((total / b as f64) as f32);
        let track = self.tracked(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            track,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns gradients for every tracked
    /// node (in particular every requires-grad leaf that influences the root).
    pub fn backward(&self, root: VarId) -> Result<Gradients, DiffError> {
        let root_t = self.value(root);
        if !root_t.shape().is_empty() {
            return Err(DiffError::NonScalarRoot {
                got: root_t.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].track {
            grads[root.0] = Some(vec![1.0]);
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads: tensors })
    }

    fn accum(&self, grads: &mut [Option<Vec<f32>>], id: VarId, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[id.0].track {
            return;
        }
        let slot = grads[id.0]
            .get_or_insert_with(|| vec![0.0f32; self.nodes[id.0].value.data().len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |dst| axpy(dst, g, 1.0));
                self.accum(grads, *b, |dst| axpy(dst, g, 1.0));
            }
            Op::Neg(x) => self.accum(grads, *x, |dst| axpy(dst, g, -1.0)),
            Op::Exp(x) => {
                let y = node.value.data();
                self.accum(grads, *x, |dst| {
                    for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                        *d += gv * yv;
                    }
                });
            }
            Op::Scale(x, c) => self.accum(grads, *x, |dst| axpy(dst, g, *c)),
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, |dst| {
                    for ((d, &gv), &bv) in dst.iter_mut().zip(g).zip(tb) {
                        *d += gv * bv;
                    }
                });
                self.accum(grads, *b, |dst| {
                    for ((d, &gv), &av) in dst.iter_mut().zip(g).zip(ta) {
                        *d += gv * av;
                    }
                });
            }
            Op::MatMul(a, b) => {
                // C = A·B ⇒ dA += dC·Bᵀ, dB += Aᵀ·dC
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = as_mat(ta.shape());
                let (_, n) = as_mat(tb.shape());
                self.accum(grads, *a, |dst| {
                    axpy(dst, &mm_nt(g, m, n, tb.data(), k), 1.0)
                });
                self.accum(grads, *b, |dst| {
                    axpy(dst, &mm_tn(ta.data(), m, k, g, n), 1.0)
                });
            }
            Op::MatMulNT(a, b) => {
                // C = A·Bᵀ ⇒ dA += dC·B, dB += dCᵀ·A
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = as_mat(ta.shape());
                let (n, _) = as_mat(tb.shape());
                self.accum(grads, *a, |dst| axpy(dst, &mm(g, m, n, tb.data(), k), 1.0));
                self.accum(grads, *b, |dst| {
                    axpy(dst, &mm_tn(g, m, n, ta.data(), k), 1.0)
                });
            }
            Op::AddRow(a, b) => {
                let d = self.value(*b).data().len();
                self.accum(grads, *a, |dst| axpy(dst, g, 1.0));
                self.accum(grads, *b, |dst| {
                    for row in g.chunks(d) {
                        axpy(dst, row, 1.0);
                    }
                });
            }
            Op::Relu(x) => {
                let src = self.value(*x).data();
                self.accum(grads, *x, |dst| {
                    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(src) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::L2Normalize { x, inv_norms } => {
                // y = x/‖x‖ ⇒ dx = (g - (g·y)·y)·(1/‖x‖), per row.
                let y = node.value.data();
                let d = y.len() / inv_norms.len();
                self.accum(grads, *x, |dst| {
                    for (row_idx, &inv) in inv_norms.iter().enumerate() {
                        let lo = row_idx * d;
                        let yr = &y[lo..lo + d];
                        let gr = &g[lo..lo + d];
                        let gy: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        let dr = &mut dst[lo..lo + d];
                        for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *o += (gv - gy * yv) * inv;
                        }
                    }
                });
            }
            Op::SetMaxPool { x, argmax } => {
                let d = argmax.len();
                self.accum(grads, *x, |dst| {
                    for (j, &row) in argmax.iter().enumerate() {
                        dst[row * d + j] += g[j];
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                // d logits = (softmax - onehot)/B, scaled by upstream g.
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f32;
                self.accum(grads, *logits, |dst| {
                    for (i, &label) in labels.iter().enumerate() {
                        let prow = &probs[i * c..(i + 1) * c];
                        let drow = &mut dst[i * c..(i + 1) * c];
                        for (o, &p) in drow.iter_mut().zip(prow) {
                            *o += scale * p;
                        }
                        drow[label] -= scale;
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).data().len();
                self.accum(grads, *a, |dst| axpy(dst, &g[..na], 1.0));
                self.accum(grads, *b, |dst| axpy(dst, &g[na..], 1.0));
            }
            Op::StackRows(rows) => {
                let d = if rows.is_empty() { 0 } else { g.len() / rows.len() };
                for (i, &r) in rows.iter().enumerate() {
                    self.accum(grads, r, |dst| axpy(dst, &g[i * d..(i + 1) * d], 1.0));
                }
            }
            Op::MeanRows(x) => {
                let t = self.value(*x);
                let (n, d) = t.dims2().expect("validated");
                let inv = 1.0 / n as f32;
                self.accum(grads, *x, |dst| {
                    for row in dst.chunks_mut(d) {
                        for (o, &gv) in row.iter_mut().zip(g) {
                            *o += gv * inv;
                        }
                    }
                });
            }
            Op::GatherRows { x, indices } => {
                let d = if indices.is_empty() { 0 } else { g.len() / indices.len() };
                self.accum(grads, *x, |dst| {
                    for (k, &i) in indices.iter().enumerate() {
                        let grow = &g[k * d..(k + 1) * d];
                        axpy(&mut dst[i * d..(i + 1) * d], grow, 1.0);
                    }
                });
            }
            Op::Transpose(x) => {
                let (n, d) = self.value(*x).dims2().expect("validated");
                self.accum(grads, *x, |dst| {
                    for i in 0..n {
                        for j in 0..d {
                            dst[i * d + j] += g[j * n + i];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.accum(grads, *x, |dst| {
                    for o in dst.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Dot(a, b) => {
                let gv = g[0];
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, |dst| axpy(dst, tb, gv));
                self.accum(grads, *b, |dst| axpy(dst, ta, gv));
            }
        }
    }
}

/// dst += c·src
fn axpy(dst: &mut [f32], src: &[f32], c: f32) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}
