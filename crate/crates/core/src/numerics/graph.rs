//! Reverse-mode differentiation over a flat tape.
//!
//! Every op appends a node holding its forward value and whatever it needs to
//! produce local gradients. `backward` walks the tape once in reverse; the
//! tape is already a topological order because nodes only reference earlier
//! nodes. Parameters are read through the borrowed [`ParamStore`] and never
//! copied onto the tape.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, log_softmax_in_place, softmax_in_place, Tensor};
use crate::error::{Error, Result};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Op kinds as recorded in an execution trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum OpKind {
    Param,
    Const,
    MatMul,
    MatMulT,
    Transpose,
    Add,
    AddRow,
    Mul,
    MaskMul,
    Scale,
    AddScalar,
    Embedding,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Relu,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    GatherRows,
    MeanPool,
    L2Normalize,
    Sum,
    Mean,
    RowDot,
    PickCols,
    Attention,
}

/// One attention block: queries `q_start..q_start+q_len` attend to keys
/// `k_start..k_start+k_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSpan {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// A contiguous run of rows, e.g. one sequence inside a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Const,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MaskMul(Var, Vec<f32>),
    Scale(Var, f32),
    AddScalar(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Relu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    MeanPool { a: Var, segs: Vec<Segment> },
    L2Normalize { a: Var, norms: Vec<f32> },
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    PickCols { a: Var, idx: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, spans: Vec<AttnSpan>, scale: f32, probs: Vec<f32> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Param(_) => OpKind::Param,
            Op::Const => OpKind::Const,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::MaskMul(..) => OpKind::MaskMul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Relu(_) => OpKind::Relu,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::MeanPool { .. } => OpKind::MeanPool,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::RowDot(..) => OpKind::RowDot,
            Op::PickCols { .. } => OpKind::PickCols,
            Op::Attention { .. } => OpKind::Attention,
        }
    }
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

const L2_EPS: f32 = 1e-12;

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    trace: Option<Vec<OpKind>>,
    // Fixed ReLU masks and how many elements have been consumed.
    pinned: Option<(Vec<bool>, usize)>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            trace: None,
            pinned: None,
        }
    }

    /// A graph that records the kind of every op it executes.
    pub fn traced(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            trace: Some(Vec::new()),
            pinned: None,
        }
    }

    /// A graph whose ReLUs keep the masks of an earlier pass (see
    /// [`Graph::relu_pattern`]) instead of looking at their inputs. Built
    /// with the same ops as that pass, it computes the smooth function that
    /// agrees with the network on the earlier point's linear piece.
    pub fn pinned(params: &'p ParamStore, pattern: Vec<bool>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            trace: None,
            pinned: Some((pattern, 0)),
        }
    }

    pub fn trace(&self) -> Option<&[OpKind]> {
        self.trace.as_deref()
    }

    pub fn take_trace(&mut self) -> Option<Vec<OpKind>> {
        self.trace.take()
    }

    /// Which elements of every ReLU input are positive, in tape order. Two
    /// forward passes with the same pattern lie on one linear piece of each
    /// ReLU, which is what finite-difference checks need to know.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let (Op::Relu(_), Some(y)) = (&n.op, &n.value) {
                out.extend(y.data().iter().map(|&v| v > 0.0));
            }
        }
        out
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
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Option<Tensor>, op: Op, requires_grad: bool) -> Result<Var> {
        if let Some(t) = &value {
            if !t.is_finite() {
                return Err(Error::NonFinite(op_name(op.kind())));
            }
        }
        if let Some(tr) = &mut self.trace {
            tr.push(op.kind());
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

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(None, Op::Param(id), true).expect("parameters are finite")
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Some(t), Op::Const, false)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Some(Tensor::matrix(m, n, out)?), Op::MatMul(a, b), rg)
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_t")?;
        let (n, k2) = self.mat_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Some(Tensor::matrix(m, n, out)?), Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Some(Tensor::matrix(n, m, out)?), Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Some(out), Op::Add(a, b), rg)
    }

    /// Broadcast-add a `[1,n]` (or `[n]`) row to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for r in 0..out.rows() {
            for (o, bv) in out.row_slice_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(Some(out), Op::AddRow(a, bias), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "mul")?;
        let mut out = self.value(a).clone();
        for (o, bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= bv;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Some(out), Op::Mul(a, b), rg)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f32>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape("mask_mul", self.shape(a), &[mask.len()]));
        }
        let mut out = self.value(a).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(a);
        self.push(Some(out), Op::MaskMul(a, mask), rg)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= s;
        }
        let rg = self.rg(a);
        self.push(Some(out), Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o += s;
        }
        let rg = self.rg(a);
        self.push(Some(out), Op::AddScalar(a), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Row lookup: `table[ids[i]]` for each i.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.mat_dims(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("embedding", &[rows, d], &[bad]));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row_slice(i));
        }
        let rg = self.rg(table);
        self.push(
            Some(Tensor::matrix(ids.len(), d, out)?),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_slice_mut(r));
        }
        let rg = self.rg(a);
        self.push(Some(out), Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            log_softmax_in_place(out.row_slice_mut(r));
        }
        let rg = self.rg(a);
        self.push(Some(out), Op::LogSoftmax(a), rg)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "layer_norm")?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Some(Tensor::matrix(m, n, out)?),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        if self.pinned.is_some() {
            let n = self.value(a).numel();
            let (pattern, used) = self.pinned.as_mut().expect("checked above");
            let Some(bits) = pattern.get(*used..*used + n) else {
                return Err(Error::shape("relu (pinned)", &[pattern.len()], &[*used + n]));
            };
            let mask = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            *used += n;
            return self.mask_mul(a, mask);
        }
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        let rg = self.rg(a);
        self.push(Some(out), Op::Relu(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", &[], &[]));
        };
        let n = self.mat_dims(first, "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, c) = self.mat_dims(p, "concat_rows")?;
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Some(Tensor::matrix(rows, n, out)?), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", &[], &[]));
        };
        let m = self.mat_dims(first, "concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += c;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..m {
                out[r * total + off..r * total + off + c].copy_from_slice(t.row_slice(r));
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Some(Tensor::matrix(m, total, out)?), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "slice_rows")?;
        if start + len > m {
            return Err(Error::shape("slice_rows", &[m, n], &[start, len]));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        self.push(Some(Tensor::matrix(len, n, out)?), Op::SliceRows { a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "slice_cols")?;
        if start + len > n {
            return Err(Error::shape("slice_cols", &[m, n], &[start, len]));
        }
        let t = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(Some(Tensor::matrix(m, len, out)?), Op::SliceCols { a, start }, rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", &[m, n], &[bad]));
        }
        let t = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(t.row_slice(i));
        }
        let rg = self.rg(a);
        self.push(
            Some(Tensor::matrix(idx.len(), n, out)?),
            Op::GatherRows { a, idx: idx.to_vec() },
            rg,
        )
    }

    /// Mean over the rows of each segment; one output row per segment.
    pub fn mean_pool(&mut self, a: Var, segs: &[Segment]) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "mean_pool")?;
        let t = self.value(a);
        let mut out = vec![0.0; segs.len() * n];
        for (s, seg) in segs.iter().enumerate() {
            if seg.len == 0 || seg.start + seg.len > m {
                return Err(Error::shape("mean_pool", &[m, n], &[seg.start, seg.len]));
            }
            let o = &mut out[s * n..(s + 1) * n];
            for r in seg.start..seg.start + seg.len {
                axpy(1.0, t.row_slice(r), o);
            }
            let inv = 1.0 / seg.len as f32;
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        let rg = self.rg(a);
        self.push(
            Some(Tensor::matrix(segs.len(), n, out)?),
            Op::MeanPool { a, segs: segs.to_vec() },
            rg,
        )
    }

    /// Mean over all rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.mat_dims(a, "mean_rows")?.0;
        self.mean_pool(a, &[Segment { start: 0, len: m }])
    }

    /// Scale each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_slice_mut(r);
            let norm = (dot(row, row) + L2_EPS).sqrt();
            norms.push(norm);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let rg = self.rg(a);
        self.push(Some(out), Op::L2Normalize { a, norms }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f32 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Some(Tensor::scalar(s)), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean", t.shape(), &[1]));
        }
        let s: f32 = t.data().iter().sum::<f32>() / t.numel() as f32;
        let rg = self.rg(a);
        self.push(Some(Tensor::scalar(s)), Op::Mean(a), rg)
    }

    /// Per-row inner product: `[m,n],[m,n] -> [m,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "row_dot")?;
        let (m, _) = self.mat_dims(a, "row_dot")?;
        let ta = self.value(a);
        let tb = self.value(b);
        let out = (0..m).map(|r| dot(ta.row_slice(r), tb.row_slice(r))).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Some(Tensor::matrix(m, 1, out)?), Op::RowDot(a, b), rg)
    }

    /// `out[i] = a[i, idx[i]]`, shape `[m,1]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "pick_cols")?;
        if idx.len() != m {
            return Err(Error::shape("pick_cols", &[m, n], &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("pick_cols", &[m, n], &[bad]));
        }
        let t = self.value(a);
        let out = idx.iter().enumerate().map(|(r, &c)| t.row_slice(r)[c]).collect();
        let rg = self.rg(a);
        self.push(
            Some(Tensor::matrix(m, 1, out)?),
            Op::PickCols { a, idx: idx.to_vec() },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows, d]` with `d` divisible by `heads`; each span
    /// names which query rows attend to which key rows. With `causal`, query
    /// `i` of a span only sees keys `0..=i` of the same span. Query rows not
    /// covered by any span produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: &[AttnSpan],
        causal: bool,
    ) -> Result<Var> {
        let (nq, d) = self.mat_dims(q, "attention")?;
        let (nk, dk) = self.mat_dims(k, "attention")?;
        if dk != d || self.shape(v) != self.shape(k) || heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::new();
        for sp in spans {
            if sp.q_start + sp.q_len > nq || sp.k_start + sp.k_len > nk || sp.k_len == 0 {
                return Err(Error::shape("attention", &[nq, nk], &[sp.q_start, sp.q_len]));
            }
            if causal && sp.q_len > sp.k_len {
                return Err(Error::shape("attention", &[sp.q_len], &[sp.k_len]));
            }
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..sp.q_len {
                    let qi = (sp.q_start + i) * d + c0;
                    let qrow = &qv[qi..qi + dh];
                    let visible = if causal { i + 1 } else { sp.k_len };
                    let base = probs.len();
                    for j in 0..sp.k_len {
                        if j < visible {
                            let kj = (sp.k_start + j) * d + c0;
                            probs.push(dot(qrow, &kv[kj..kj + dh]) * scale);
                        } else {
                            probs.push(f32::NEG_INFINITY);
                        }
                    }
                    let prow = &mut probs[base..];
                    softmax_in_place(&mut prow[..visible]);
                    for p in prow[visible..].iter_mut() {
                        *p = 0.0;
                    }
                    let orow = &mut out[qi..qi + dh];
                    for j in 0..visible {
                        let p = probs[base + j];
                        let vj = (sp.k_start + j) * d + c0;
                        axpy(p, &vv[vj..vj + dh], orow);
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Some(Tensor::matrix(nq, d, out)?),
            Op::Attention {
                q,
                k,
                v,
                heads,
                spans: spans.to_vec(),
                scale,
                probs,
            },
            rg,
        )
    }

    /// Gradients of a scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut out = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads, &mut out);
        }
        for (_, t) in out.iter() {
            if !t.is_finite() {
                return Err(Error::NonFinite("backward"));
            }
        }
        Ok(out)
    }

    fn acc_buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        slot.as_mut()
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let node = &self.nodes[i];
        let y = self.value(Var(i));
        let gd = g.data();
        match &node.op {
            Op::Const => {}
            Op::Param(id) => out.get_mut(*id).add_assign(g),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.acc_buf(grads, *a) {
                    gemm_nt(gd, bv, da.data_mut(), m, n, k);
                }
                if let Some(db) = self.acc_buf(grads, *b) {
                    gemm_tn(av, gd, db.data_mut(), m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.acc_buf(grads, *a) {
                    gemm_nn(gd, bv, da.data_mut(), m, n, k);
                }
                if let Some(db) = self.acc_buf(grads, *b) {
                    gemm_tn(gd, av, db.data_mut(), m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(da) = self.acc_buf(grads, *a) {
                    let dd = da.data_mut();
                    for r in 0..m {
                        for c in 0..n {
                            dd[r * n + c] += gd[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if let Some(dp) = self.acc_buf(grads, *p) {
                        dp.add_assign(g);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.acc_buf(grads, *bias) {
                    let n = g.cols();
                    let dd = db.data_mut();
                    for r in 0..g.rows() {
                        axpy(1.0, &gd[r * n..(r + 1) * n], dd);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.acc_buf(grads, *a) {
                    for ((d, gv), bx) in da.data_mut().iter_mut().zip(gd).zip(bv) {
                        *d += gv * bx;
                    }
                }
                if let Some(db) = self.acc_buf(grads, *b) {
                    for ((d, gv), ax) in db.data_mut().iter_mut().zip(gd).zip(av) {
                        *d += gv * ax;
                    }
                }
            }
            Op::MaskMul(a, mask) => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    for ((d, gv), m) in da.data_mut().iter_mut().zip(gd).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    axpy(*s, gd, da.data_mut());
                }
            }
            Op::AddScalar(a) => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    da.add_assign(g);
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(dt) = self.acc_buf(grads, *table) {
                    let d = g.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &gd[r * d..(r + 1) * d], dt.row_slice_mut(id));
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    let n = y.cols();
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = &gd[r * n..(r + 1) * n];
                        let s = dot(yr, gr);
                        let dr = da.row_slice_mut(r);
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    let n = y.cols();
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = &gd[r * n..(r + 1) * n];
                        let s: f32 = gr.iter().sum();
                        let dr = da.row_slice_mut(r);
                        for j in 0..n {
                            dr[j] += gr[j] - yr[j].exp() * s;
                        }
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
                let n = y.cols();
                let m = y.rows();
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.acc_buf(grads, *gamma) {
                    let dd = dg.data_mut();
                    for r in 0..m {
                        for j in 0..n {
                            dd[j] += gd[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(db) = self.acc_buf(grads, *beta) {
                    let dd = db.data_mut();
                    for r in 0..m {
                        axpy(1.0, &gd[r * n..(r + 1) * n], dd);
                    }
                }
                if let Some(dx) = self.acc_buf(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let xh = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gd[r * n + j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f32>() / n as f32;
                        let mean_dx = dot(&dxhat, xh) / n as f32;
                        let dr = dx.row_slice_mut(r);
                        for j in 0..n {
                            dr[j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    for ((d, gv), yv) in da.data_mut().iter_mut().zip(gd).zip(y.data()) {
                        if *yv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(dp) = self.acc_buf(grads, *p) {
                        axpy(1.0, &gd[off..off + len], dp.data_mut());
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if let Some(dp) = self.acc_buf(grads, *p) {
                        for r in 0..y.rows() {
                            axpy(1.0, &gd[r * total + off..r * total + off + c], dp.row_slice_mut(r));
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { a, start } => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    let n = y.cols();
                    axpy(1.0, gd, &mut da.data_mut()[start * n..start * n + gd.len()]);
                }
            }
            Op::SliceCols { a, start } => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    let len = y.cols();
                    for r in 0..y.rows() {
                        axpy(1.0, &gd[r * len..(r + 1) * len], &mut da.row_slice_mut(r)[*start..start + len]);
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    let n = y.cols();
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(1.0, &gd[r * n..(r + 1) * n], da.row_slice_mut(src));
                    }
                }
            }
            Op::MeanPool { a, segs } => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    let n = y.cols();
                    for (s, seg) in segs.iter().enumerate() {
                        let inv = 1.0 / seg.len as f32;
                        for r in seg.start..seg.start + seg.len {
                            axpy(inv, &gd[s * n..(s + 1) * n], da.row_slice_mut(r));
                        }
                    }
                }
            }
            Op::L2Normalize { a, norms } => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    let n = y.cols();
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = &gd[r * n..(r + 1) * n];
                        let s = dot(yr, gr);
                        let inv = 1.0 / norms[r];
                        let dr = da.row_slice_mut(r);
                        for j in 0..n {
                            dr[j] += (gr[j] - yr[j] * s) * inv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    let gv = gd[0];
                    for d in da.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    let gv = gd[0] / da.numel() as f32;
                    for d in da.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::RowDot(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(da) = self.acc_buf(grads, *a) {
                    for r in 0..av.rows() {
                        axpy(gd[r], bv.row_slice(r), da.row_slice_mut(r));
                    }
                }
                if let Some(db) = self.acc_buf(grads, *b) {
                    for r in 0..bv.rows() {
                        axpy(gd[r], av.row_slice(r), db.row_slice_mut(r));
                    }
                }
            }
            Op::PickCols { a, idx } => {
                if let Some(da) = self.acc_buf(grads, *a) {
                    for (r, &c) in idx.iter().enumerate() {
                        da.row_slice_mut(r)[c] += gd[r];
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                spans,
                scale,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, spans, *scale, probs, gd, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: &[AttnSpan],
        scale: f32,
        probs: &[f32],
        gd: &[f32],
        grads: &mut [Option<Tensor>],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut dq = self.nodes[q.0].requires_grad.then(|| vec![0.0; qv.len()]);
        let mut dk = self.nodes[k.0].requires_grad.then(|| vec![0.0; kv.len()]);
        let mut dv = self.nodes[v.0].requires_grad.then(|| vec![0.0; vv.len()]);
        let mut ds = Vec::new();
        let mut pbase = 0;
        for sp in spans {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..sp.q_len {
                    let qi = (sp.q_start + i) * d + c0;
                    let prow = &probs[pbase..pbase + sp.k_len];
                    pbase += sp.k_len;
                    let go = &gd[qi..qi + dh];
                    ds.clear();
                    let mut s = 0.0f32;
                    for j in 0..sp.k_len {
                        let p = prow[j];
                        if p == 0.0 {
                            ds.push(0.0);
                            continue;
                        }
                        let vj = (sp.k_start + j) * d + c0;
                        if let Some(dv) = dv.as_mut() {
                            axpy(p, go, &mut dv[vj..vj + dh]);
                        }
                        let dp = dot(go, &vv[vj..vj + dh]);
                        ds.push(dp);
                        s += p * dp;
                    }
                    for j in 0..sp.k_len {
                        let p = prow[j];
                        if p == 0.0 {
                            continue;
                        }
                        let dsj = p * (ds[j] - s) * scale;
                        let kj = (sp.k_start + j) * d + c0;
                        if let Some(dq) = dq.as_mut() {
                            axpy(dsj, &kv[kj..kj + dh], &mut dq[qi..qi + dh]);
                        }
                        if let Some(dk) = dk.as_mut() {
                            axpy(dsj, &qv[qi..qi + dh], &mut dk[kj..kj + dh]);
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let (Some(buf), Some(acc)) = (buf, self.acc_buf(grads, var)) {
                axpy(1.0, &buf, acc.data_mut());
            }
        }
    }
}

fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Param => "param",
        OpKind::Const => "constant",
        OpKind::MatMul => "matmul",
        OpKind::MatMulT => "matmul_t",
        OpKind::Transpose => "transpose",
        OpKind::Add => "add",
        OpKind::AddRow => "add_row",
        OpKind::Mul => "mul",
        OpKind::MaskMul => "mask_mul",
        OpKind::Scale => "scale",
        OpKind::AddScalar => "add_scalar",
        OpKind::Embedding => "embedding",
        OpKind::Softmax => "softmax",
        OpKind::LogSoftmax => "log_softmax",
        OpKind::LayerNorm => "layer_norm",
        OpKind::Relu => "relu",
        OpKind::ConcatRows => "concat_rows",
        OpKind::ConcatCols => "concat_cols",
        OpKind::SliceRows => "slice_rows",
        OpKind::SliceCols => "slice_cols",
        OpKind::GatherRows => "gather_rows",
        OpKind::MeanPool => "mean_pool",
        OpKind::L2Normalize => "l2_normalize",
        OpKind::Sum => "sum",
        OpKind::Mean => "mean",
        OpKind::RowDot => "row_dot",
        OpKind::PickCols => "pick_cols",
        OpKind::Attention => "attention",
    }
}
