//! Reverse-mode differentiable computation over dense f64 tensors.
//!
//! A [`Tape`] records every executed operation (define-by-run); [`Tape::backprop`]
//! replays it in reverse, visiting each node exactly once and accumulating
//! gradients additively across fan-out. Tensors are rank-1 or rank-2, row-major,
//! 64-bit floats throughout; scalars are shape `[1]`.
//!
//! A tape and its nodes are confined to one worker at a time; distinct tapes
//! may run in parallel.

mod check;

pub use check::{
    finite_diff_check, finite_diff_check_multi, op_gradient_suite, OpCheck, DEFAULT_FD_STEP,
};

use crate::error::{Error, Result};

/// Plain tensor storage (parameters, checkpoints, corpus embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::BadShape {
                op: "tensor",
                expected: "positive dimensions",
                got: shape,
            });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::BadShape {
                op: "tensor",
                expected: "product(shape) == len(data)",
                got: shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm(NodeId, f64),
    Tanh(NodeId),
    Gather(NodeId, Vec<usize>),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    StackRows(Vec<NodeId>),
    SqNorm(NodeId),
    Mean(NodeId),
    CrossEntropy(NodeId, usize),
    LogSumExp(NodeId),
    LogSumExpRows(NodeId),
    Reshape(NodeId),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

impl Node {
    fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Interpret a rank-1/rank-2 shape as (rows, cols).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => unreachable!("tensors are rank 1 or 2"),
    }
}

fn max_shift_lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Ordered record of executed operations; parents always precede children.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by forward op"
        );
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].data[0]
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient accumulated at `id` by the last [`Tape::backprop`] run.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), requires_grad, Op::Leaf)
    }

    pub fn leaf_parts(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t, requires_grad))
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    // ---- forward ops ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for i in 0..m {
                for p in 0..k {
                    let a_ip = da[i * k + p];
                    if a_ip != 0.0 {
                        let brow = &db[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += a_ip * brow[j];
                        }
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                expected: "rank-2 tensor",
                got: sa,
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = da[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, rg, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa, out, rg, Op::Add(a, b)))
    }

    /// `a` is `m x n`, `b` is a length-`n` row added to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        let (m, n) = rows_cols(&sa);
        if sb.len() != 1 || sb[0] != n {
            return Err(Error::ShapeMismatch {
                op: "add-row",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = self.nodes[a.0].data.clone();
        let db = &self.nodes[b.0].data;
        for r in 0..m {
            for j in 0..n {
                out[r * n + j] += db[j];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa, out, rg, Op::AddRow(a, b)))
    }

    /// `a` is `m x n`, `b` is a length-`n` row multiplied into every row of `a`.
    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        let (m, n) = rows_cols(&sa);
        if sb.len() != 1 || sb[0] != n {
            return Err(Error::ShapeMismatch {
                op: "mul-row",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = self.nodes[a.0].data.clone();
        let db = &self.nodes[b.0].data;
        for r in 0..m {
            for j in 0..n {
                out[r * n + j] *= db[j];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa, out, rg, Op::MulRow(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.shape_of(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, rg, Op::Scale(a, c))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "elementwise-mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa, out, rg, Op::Mul(a, b)))
    }

    /// Row-wise softmax with max-shift stabilization.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(a).to_vec();
        let (m, n) = rows_cols(&shape);
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &da[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[r * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[r * n + j] /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::Softmax(a)))
    }

    /// Row-wise log-softmax with max-shift stabilization.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(a).to_vec();
        let (m, n) = rows_cols(&shape);
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &da[r * n..(r + 1) * n];
            let lse = max_shift_lse(row);
            for j in 0..n {
                out[r * n + j] = row[j] - lse;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::LogSoftmax(a)))
    }

    /// Row-wise layer normalization (no affine part; apply via mul_row/add_row).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.shape_of(a).to_vec();
        let (m, n) = rows_cols(&shape);
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &da[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * inv;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::LayerNorm(a, eps)))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        let shape = self.shape_of(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, rg, Op::Tanh(a))
    }

    /// Embedding gather: `table` is `V x d`, output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let st = self.shape_of(table).to_vec();
        if st.len() != 2 {
            return Err(Error::BadShape {
                op: "embedding-gather",
                expected: "rank-2 table",
                got: st,
            });
        }
        let (v, d) = (st[0], st[1]);
        let mut out = vec![0.0; ids.len() * d];
        {
            let dt = &self.nodes[table.0].data;
            for (r, &id) in ids.iter().enumerate() {
                if id >= v {
                    return Err(Error::GatherOutOfRange { index: id, vocab: v });
                }
                out[r * d..(r + 1) * d].copy_from_slice(&dt[id * d..(id + 1) * d]);
            }
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Gather(table, ids.to_vec()),
        ))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        let (ma, na) = rows_cols(&sa);
        let (mb, nb) = rows_cols(&sb);
        if na != nb {
            return Err(Error::ShapeMismatch {
                op: "concat-rows",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = Vec::with_capacity((ma + mb) * na);
        out.extend_from_slice(&self.nodes[a.0].data);
        out.extend_from_slice(&self.nodes[b.0].data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![ma + mb, na], out, rg, Op::ConcatRows(a, b)))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        let (ma, na) = rows_cols(&sa);
        let (mb, nb) = rows_cols(&sb);
        if ma != mb {
            return Err(Error::ShapeMismatch {
                op: "concat-cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = vec![0.0; ma * (na + nb)];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for r in 0..ma {
                out[r * (na + nb)..r * (na + nb) + na]
                    .copy_from_slice(&da[r * na..(r + 1) * na]);
                out[r * (na + nb) + na..(r + 1) * (na + nb)]
                    .copy_from_slice(&db[r * nb..(r + 1) * nb]);
            }
        }
        let keep_rank1 = sa.len() == 1 && sb.len() == 1;
        let shape = if keep_rank1 {
            vec![na + nb]
        } else {
            vec![ma, na + nb]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::ConcatCols(a, b)))
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        let (m, n) = rows_cols(&sa);
        if r0 >= r1 || r1 > m {
            return Err(Error::BadShape {
                op: "slice",
                expected: "row range inside tensor",
                got: sa,
            });
        }
        let out = self.nodes[a.0].data[r0 * n..r1 * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![r1 - r0, n], out, rg, Op::SliceRows(a, r0)))
    }

    /// Stack many equal-width vectors (or matrices) into one matrix, top to
    /// bottom. n-ary so large InfoNCE batches assemble in linear time.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::BadShape {
                op: "stack-rows",
                expected: "at least one part",
                got: vec![],
            });
        };
        let n = rows_cols(self.shape_of(first)).1;
        let mut rows = 0;
        for &p in parts {
            let (m, w) = rows_cols(self.shape_of(p));
            if w != n {
                return Err(Error::ShapeMismatch {
                    op: "stack-rows",
                    lhs: vec![rows, n],
                    rhs: self.shape_of(p).to_vec(),
                });
            }
            rows += m;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, n], out, rg, Op::StackRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        let (m, n) = rows_cols(&sa);
        if c0 >= c1 || c1 > n {
            return Err(Error::BadShape {
                op: "slice",
                expected: "column range inside tensor",
                got: sa,
            });
        }
        let w = c1 - c0;
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * w];
        for r in 0..m {
            out[r * w..(r + 1) * w].copy_from_slice(&da[r * n + c0..r * n + c1]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![m, w], out, rg, Op::SliceCols(a, c0)))
    }

    /// Sum of squared entries, as a scalar node.
    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].data.iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![v], rg, Op::SqNorm(a))
    }

    /// Mean of all entries, as a scalar node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].numel();
        let v = self.nodes[a.0].data.iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![v], rg, Op::Mean(a))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].numel();
        let m = self.mean(a);
        self.scale(m, n as f64)
    }

    /// `-log softmax(logits)[label]` for a rank-1 logits vector.
    pub fn cross_entropy_with_logits(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let s = self.shape_of(logits).to_vec();
        if s.len() != 1 {
            return Err(Error::BadShape {
                op: "cross-entropy-with-logits",
                expected: "rank-1 logits",
                got: s,
            });
        }
        if label >= s[0] {
            return Err(Error::LabelOutOfRange {
                label,
                classes: s[0],
            });
        }
        let row = &self.nodes[logits.0].data;
        let v = max_shift_lse(row) - row[label];
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![v], rg, Op::CrossEntropy(logits, label)))
    }

    /// Log-sum-exp over all entries with max-shift stabilization.
    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let v = max_shift_lse(&self.nodes[a.0].data);
        let rg = self.rg(a);
        self.push(vec![1], vec![v], rg, Op::LogSumExp(a))
    }

    /// Row-wise log-sum-exp: `m x n` -> length-`m` vector.
    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        let (m, n) = rows_cols(&sa);
        let da = &self.nodes[a.0].data;
        let out: Vec<f64> = (0..m).map(|r| max_shift_lse(&da[r * n..(r + 1) * n])).collect();
        let rg = self.rg(a);
        Ok(self.push(vec![m], out, rg, Op::LogSumExpRows(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.nodes[a.0].numel() {
            return Err(Error::BadShape {
                op: "reshape",
                expected: "same element count",
                got: shape,
            });
        }
        let out = self.nodes[a.0].data.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::Reshape(a)))
    }

    // ---- backward ------------------------------------------------------

    /// Fill `grad` on every node that `root` depends on; `root` must be scalar.
    ///
    /// Deterministic: two runs over the same tape produce bit-identical grads.
    pub fn backprop(&mut self, root: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::NonScalarRoot { shape: vec![] });
        }
        if self.nodes[root.0].numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.nodes[root.0].shape.clone(),
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (parents, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = node.grad.as_ref().expect("checked above");
            let out = &node.data;
            let shape = &node.shape;

            let acc = |nodes: &mut [Node], id: NodeId, f: &mut dyn FnMut(&mut [f64], &[f64])| {
                let (data_copy, want) = {
                    let p = &nodes[id.0];
                    (p.data.clone(), p.requires_grad)
                };
                if !want {
                    return;
                }
                let numel = data_copy.len();
                let gslot = nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel]);
                f(gslot, &data_copy);
            };

            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = rows_cols(&parents[a.0].shape);
                    let n = rows_cols(&parents[b.0].shape).1;
                    let bdata = parents[b.0].data.clone();
                    let adata = parents[a.0].data.clone();
                    acc(parents, *a, &mut |ga, _| {
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i2 * n + j] * bdata[p * n + j];
                                }
                                ga[i2 * k + p] += s;
                            }
                        }
                    });
                    acc(parents, *b, &mut |gb, _| {
                        for p in 0..k {
                            for i2 in 0..m {
                                let a_ip = adata[i2 * k + p];
                                if a_ip != 0.0 {
                                    for j in 0..n {
                                        gb[p * n + j] += a_ip * g[i2 * n + j];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Transpose(a) => {
                    let (n2, m2) = rows_cols(shape);
                    acc(parents, *a, &mut |ga, _| {
                        for i2 in 0..n2 {
                            for j in 0..m2 {
                                ga[j * n2 + i2] += g[i2 * m2 + j];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(parents, *a, &mut |ga, _| {
                        for (gi, &gv) in ga.iter_mut().zip(g) {
                            *gi += gv;
                        }
                    });
                    acc(parents, *b, &mut |gb, _| {
                        for (gi, &gv) in gb.iter_mut().zip(g) {
                            *gi += gv;
                        }
                    });
                }
                Op::AddRow(a, b) => {
                    let (m, n) = rows_cols(shape);
                    acc(parents, *a, &mut |ga, _| {
                        for (gi, &gv) in ga.iter_mut().zip(g) {
                            *gi += gv;
                        }
                    });
                    acc(parents, *b, &mut |gb, _| {
                        for r in 0..m {
                            for j in 0..n {
                                gb[j] += g[r * n + j];
                            }
                        }
                    });
                }
                Op::MulRow(a, b) => {
                    let (m, n) = rows_cols(shape);
                    let brow = parents[b.0].data.clone();
                    let adata = parents[a.0].data.clone();
                    acc(parents, *a, &mut |ga, _| {
                        for r in 0..m {
                            for j in 0..n {
                                ga[r * n + j] += g[r * n + j] * brow[j];
                            }
                        }
                    });
                    acc(parents, *b, &mut |gb, _| {
                        for r in 0..m {
                            for j in 0..n {
                                gb[j] += g[r * n + j] * adata[r * n + j];
                            }
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(parents, *a, &mut |ga, _| {
                        for (gi, &gv) in ga.iter_mut().zip(g) {
                            *gi += c * gv;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let bdata = parents[b.0].data.clone();
                    let adata = parents[a.0].data.clone();
                    acc(parents, *a, &mut |ga, _| {
                        for idx in 0..ga.len() {
                            ga[idx] += g[idx] * bdata[idx];
                        }
                    });
                    acc(parents, *b, &mut |gb, _| {
                        for idx in 0..gb.len() {
                            gb[idx] += g[idx] * adata[idx];
                        }
                    });
                }
                Op::Softmax(a) => {
                    let (m, n) = rows_cols(shape);
                    acc(parents, *a, &mut |ga, _| {
                        for r in 0..m {
                            let y = &out[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let dot: f64 = y.iter().zip(gr).map(|(yj, gj)| yj * gj).sum();
                            for j in 0..n {
                                ga[r * n + j] += y[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let (m, n) = rows_cols(shape);
                    acc(parents, *a, &mut |ga, _| {
                        for r in 0..m {
                            let y = &out[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let gsum: f64 = gr.iter().sum();
                            for j in 0..n {
                                ga[r * n + j] += gr[j] - y[j].exp() * gsum;
                            }
                        }
                    });
                }
                Op::LayerNorm(a, eps) => {
                    let (m, n) = rows_cols(shape);
                    let eps = *eps;
                    acc(parents, *a, &mut |ga, x| {
                        for r in 0..m {
                            let xr = &x[r * n..(r + 1) * n];
                            let y = &out[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let mean = xr.iter().sum::<f64>() / n as f64;
                            let var =
                                xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                            let inv = 1.0 / (var + eps).sqrt();
                            let gmean = gr.iter().sum::<f64>() / n as f64;
                            let gydot =
                                gr.iter().zip(y).map(|(gj, yj)| gj * yj).sum::<f64>() / n as f64;
                            for j in 0..n {
                                ga[r * n + j] += inv * (gr[j] - gmean - y[j] * gydot);
                            }
                        }
                    });
                }
                Op::Tanh(a) => {
                    acc(parents, *a, &mut |ga, _| {
                        for idx in 0..ga.len() {
                            ga[idx] += g[idx] * (1.0 - out[idx] * out[idx]);
                        }
                    });
                }
                Op::Gather(table, ids) => {
                    let d = rows_cols(shape).1;
                    acc(parents, *table, &mut |gt, _| {
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                gt[id * d + j] += g[r * d + j];
                            }
                        }
                    });
                }
                Op::ConcatRows(a, b) => {
                    let na = parents[a.0].numel();
                    acc(parents, *a, &mut |ga, _| {
                        for idx in 0..ga.len() {
                            ga[idx] += g[idx];
                        }
                    });
                    acc(parents, *b, &mut |gb, _| {
                        for idx in 0..gb.len() {
                            gb[idx] += g[na + idx];
                        }
                    });
                }
                Op::ConcatCols(a, b) => {
                    let (m, na) = rows_cols(&parents[a.0].shape);
                    let nb = rows_cols(&parents[b.0].shape).1;
                    let w = na + nb;
                    acc(parents, *a, &mut |ga, _| {
                        for r in 0..m {
                            for j in 0..na {
                                ga[r * na + j] += g[r * w + j];
                            }
                        }
                    });
                    acc(parents, *b, &mut |gb, _| {
                        for r in 0..m {
                            for j in 0..nb {
                                gb[r * nb + j] += g[r * w + na + j];
                            }
                        }
                    });
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = parents[p.0].numel();
                        acc(parents, p, &mut |gp, _| {
                            for idx in 0..len {
                                gp[idx] += g[offset + idx];
                            }
                        });
                        offset += len;
                    }
                }
                Op::SliceRows(a, r0) => {
                    let n = rows_cols(shape).1;
                    let r0 = *r0;
                    acc(parents, *a, &mut |ga, _| {
                        for idx in 0..g.len() {
                            ga[r0 * n + idx] += g[idx];
                        }
                    });
                }
                Op::SliceCols(a, c0) => {
                    let (m, w) = rows_cols(shape);
                    let n = rows_cols(&parents[a.0].shape).1;
                    let c0 = *c0;
                    acc(parents, *a, &mut |ga, _| {
                        for r in 0..m {
                            for j in 0..w {
                                ga[r * n + c0 + j] += g[r * w + j];
                            }
                        }
                    });
                }
                Op::SqNorm(a) => {
                    acc(parents, *a, &mut |ga, x| {
                        for idx in 0..ga.len() {
                            ga[idx] += 2.0 * x[idx] * g[0];
                        }
                    });
                }
                Op::Mean(a) => {
                    let n = parents[a.0].numel() as f64;
                    acc(parents, *a, &mut |ga, _| {
                        for gi in ga.iter_mut() {
                            *gi += g[0] / n;
                        }
                    });
                }
                Op::CrossEntropy(a, label) => {
                    let label = *label;
                    acc(parents, *a, &mut |ga, x| {
                        let lse = max_shift_lse(x);
                        for (j, gj) in ga.iter_mut().enumerate() {
                            let p = (x[j] - lse).exp();
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            *gj += (p - onehot) * g[0];
                        }
                    });
                }
                Op::LogSumExp(a) => {
                    acc(parents, *a, &mut |ga, x| {
                        let lse = out[0];
                        for (j, gj) in ga.iter_mut().enumerate() {
                            *gj += (x[j] - lse).exp() * g[0];
                        }
                    });
                }
                Op::LogSumExpRows(a) => {
                    let (m, n) = {
                        let s = &parents[a.0].shape;
                        rows_cols(s)
                    };
                    acc(parents, *a, &mut |ga, x| {
                        for r in 0..m {
                            let lse = out[r];
                            for j in 0..n {
                                ga[r * n + j] += (x[r * n + j] - lse).exp() * g[r];
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(parents, *a, &mut |ga, _| {
                        for idx in 0..ga.len() {
                            ga[idx] += g[idx];
                        }
                    });
                }
            }
        }

        for n in &mut self.nodes {
            if n.requires_grad && matches!(n.op, Op::Leaf) && n.grad.is_none() {
                n.grad = Some(vec![0.0; n.numel()]);
            }
        }
        Ok(())
    }
}
