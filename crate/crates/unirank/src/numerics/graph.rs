//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. Because nodes are only ever appended, creation order is a
//! topological order, and `backward` walks it in reverse exactly once.
//! Gradients reaching a node through several consumers are summed.
//!
//! Tensors in the graph are treated as matrices. Vectors are `1 x n` rows
//! unless stated otherwise. The only broadcasts are the explicit
//! [`Graph::add_row`] (row vector over every row) and
//! [`Graph::add_scalar`] (a `1 x 1` node over every entry).

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    PassThrough(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    RepeatRows(Var),
    GatherRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    PairwiseDiff(Var),
    LayerNormRows { x: Var, gain: Var, bias: Var, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    SegmentPool { table: Var, w: Var, ids: Vec<usize>, offsets: Vec<usize>, alphas: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    macs: u64,
    detached: Vec<Tensor>,
    replay: Option<std::vec::IntoIter<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("internal shape")
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true, macs: 0, detached: Vec::new(), replay: None }
    }

    /// A graph that computes values only; nothing is differentiable.
    pub fn inference() -> Self {
        Self { record: false, ..Self::new() }
    }

    /// A graph whose `detach` calls return the given tensors, in order,
    /// instead of the live values. Used to differentiate a stop-gradient
    /// objective numerically: the detached side stays frozen at the point
    /// where it was first captured.
    pub fn replaying(frozen: Vec<Tensor>) -> Self {
        Self { replay: Some(frozen.into_iter()), ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node created after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Multiply-adds performed by matrix products so far.
    pub fn matmul_macs(&self) -> u64 {
        self.macs
    }

    /// Values captured by `detach`, in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let (op, requires_grad) = if self.record {
            let rg = self.inputs(&op).iter().any(|p| self.nodes[p.0].requires_grad);
            if rg {
                (op, true)
            } else {
                (Op::Leaf, false)
            }
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: self.record });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: same value, no path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = match self.replay.as_mut().and_then(|r| r.next()) {
            Some(frozen) => frozen,
            None => self.value(x).clone(),
        };
        self.detached.push(value.clone());
        self.constant(value)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        use Op::*;
        match op {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | AddScalar(a, b) => vec![*a, *b],
            Scale(a, _) | PassThrough(a) | Transpose(a) | SliceCols(a, _) | RepeatRows(a)
            | GatherRows(a, _) | SoftmaxRows(a) | LogSoftmaxRows(a) | Exp(a) | Ln(a)
            | Square(a) | Sigmoid(a) | Tanh(a) | Gelu(a) | Recip(a) | Sum(a) | Mean(a)
            | RowSums(a) | PairwiseDiff(a) => vec![*a],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
            LayerNormRows { x, gain, bias, .. } => vec![*x, *gain, *bias],
            L2NormalizeRows { x, .. } => vec![*x],
            SegmentPool { table, w, .. } => vec![*table, *w],
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `a · b` for `a: m x k`, `b: k x n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, false);
        self.macs += (m * k * n) as u64;
        Ok(self.push(mat(m, n, out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (1, k), &mut out, false);
        self.macs += (m * k * n) as u64;
        Ok(self.push(mat(m, n, out), Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    // ---- elementwise binary ---------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `a + v` with the `1 x n` row `v` added to every row of `a`.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(v));
        if tv.rows() != 1 || tv.cols() != ta.cols() {
            return Err(mismatch("add_row", ta, tv));
        }
        let n = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tv.data()) {
                *o += b;
            }
        }
        let t = mat(ta.rows(), n, out);
        Ok(self.push(t, Op::AddRow(a, v)))
    }

    /// `a + s` for a `1 x 1` node `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(mismatch("add_scalar", self.value(a), ts));
        }
        let c = ts.item();
        let t = self.value(a).map(|x| x + c);
        Ok(self.push(t, Op::AddScalar(a, s)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    /// `a + t` for a constant tensor `t`.
    pub fn add_const(&mut self, a: Var, t: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != t.shape() {
            return Err(mismatch("add_const", ta, t));
        }
        let out = ta.zip_map(t, |x, y| x + y);
        Ok(self.push(out, Op::PassThrough(a)))
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::PassThrough(a))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, t: &Tensor) -> Result<Var> {
        let c = self.constant(t.clone());
        self.mul(a, c)
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidShape("concat of nothing".into()));
        };
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(mat(rows, cols, out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidShape("concat of nothing".into()));
        };
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(first), t));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        Ok(self.push(mat(rows, cols, out), Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start .. start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(a);
        if width == 0 || start + width > t.cols() {
            return Err(Error::InvalidShape(format!(
                "slice_cols {start}..{} of {:?}",
                start + width,
                t.shape()
            )));
        }
        let mut out = Vec::with_capacity(t.rows() * width);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row_slice(r)[start..start + width]);
        }
        let rows = t.rows();
        Ok(self.push(mat(rows, width, out), Op::SliceCols(a, start)))
    }

    /// Tile a `1 x n` row into `m x n`.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != 1 || m == 0 {
            return Err(Error::InvalidShape(format!("repeat_rows({m}) of {:?}", t.shape())));
        }
        let n = t.cols();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(t.data());
        }
        Ok(self.push(mat(m, n, out), Op::RepeatRows(a)))
    }

    /// Row lookup into a table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::UnknownId { kind: "row", id: bad });
        }
        let n = t.cols();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(t.row_slice(i));
        }
        Ok(self.push(mat(ids.len(), n, out), Op::GatherRows(table, ids.to_vec())))
    }

    /// Attention pooling of token rows, one output row per sequence:
    /// `α = softmax(w · table[t_j])`, `p = Σ α_j table[t_j]`.
    /// `w` is `1 x n`. Returns the pooled `m x n` matrix and each
    /// sequence's weights.
    pub fn segment_pool(&mut self, table: Var, w: Var, seqs: &[&[usize]]) -> Result<(Var, Vec<Vec<f64>>)> {
        let (tt, tw) = (self.value(table), self.value(w));
        let n = tt.cols();
        if tw.rows() != 1 || tw.cols() != n {
            return Err(mismatch("segment_pool", tt, tw));
        }
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::EmptySequence);
        }
        let wv = tw.data();
        let mut out = Vec::with_capacity(seqs.len() * n);
        let mut ids = Vec::new();
        let mut offsets = vec![0];
        let mut weights = Vec::with_capacity(seqs.len());
        for toks in seqs {
            if let Some(&bad) = toks.iter().find(|&&i| i >= tt.rows()) {
                return Err(Error::UnknownId { kind: "row", id: bad });
            }
            let mut a: Vec<f64> = toks.iter().map(|&t| tt.row_slice(t).iter().zip(wv).map(|(x, y)| x * y).sum()).collect();
            softmax_in_place(&mut a);
            let mut p = vec![0.0; n];
            for (&t, &aj) in toks.iter().zip(&a) {
                for (pv, hv) in p.iter_mut().zip(tt.row_slice(t)) {
                    *pv += aj * hv;
                }
            }
            out.extend_from_slice(&p);
            ids.extend_from_slice(toks);
            offsets.push(ids.len());
            weights.push(a);
        }
        let alphas = weights.concat();
        let v = self.push(mat(seqs.len(), n, out), Op::SegmentPool { table, w, ids, offsets, alphas });
        Ok((v, weights))
    }

    // ---- nonlinear ------------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = mat(t.rows(), n, out);
        self.push(t, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = mat(t.rows(), n, out);
        self.push(t, Op::LogSoftmaxRows(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(fast_tanh);
        self.push(t, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| 0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x))));
        self.push(t, Op::Gelu(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| 1.0 / x);
        self.push(t, Op::Recip(a))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Per-row sums, `m x n -> m x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let sums: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        self.push(Tensor::column(sums), Op::RowSums(a))
    }

    /// For a `1 x k` row `s`, the `k x k` matrix `D[j][l] = s[l] - s[j]`.
    pub fn pairwise_diff(&mut self, s: Var) -> Result<Var> {
        let t = self.value(s);
        if t.rows() != 1 {
            return Err(Error::InvalidShape(format!("pairwise_diff of {:?}", t.shape())));
        }
        let k = t.cols();
        let v = t.data();
        let mut out = Vec::with_capacity(k * k);
        for j in 0..k {
            for l in 0..k {
                out.push(v[l] - v[j]);
            }
        }
        Ok(self.push(mat(k, k, out), Op::PairwiseDiff(s)))
    }

    // ---- normalisation --------------------------------------------------

    /// Layer normalisation of each row with `1 x n` gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return Err(mismatch("layer_norm_rows", tx, tg));
        }
        let mut out = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row_slice(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..n {
                out.push((row[c] - mu) * is * tg.data()[c] + tb.data()[c]);
            }
        }
        let t = mat(tx.rows(), n, out);
        Ok(self.push(t, Op::LayerNormRows { x, gain, bias, inv_std }))
    }

    /// Scale each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroVector);
            }
            norms.push(norm);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let t = mat(t.rows(), n, out);
        Ok(self.push(t, Op::L2NormalizeRows { x, norms }))
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].requires_grad {
                    // dA = g · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), tb.data(), (1, n), &mut da, false);
                    self.accumulate(grads, *a, mat(m, k, da));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · g
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), (1, k), g.data(), (n, 1), &mut db, false);
                    self.accumulate(grads, *b, mat(k, n, db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.nodes[a.0].requires_grad {
                    // dA = g · B
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), tb.data(), (k, 1), &mut da, false);
                    self.accumulate(grads, *a, mat(m, k, da));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = gᵀ · A
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), (1, n), ta.data(), (k, 1), &mut db, false);
                    self.accumulate(grads, *b, mat(n, k, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(tb, |gv, bv| gv * bv));
                self.accumulate(grads, *b, g.zip_map(ta, |gv, av| gv * av));
            }
            Op::AddRow(a, v) => {
                self.accumulate(grads, *a, g.clone());
                let n = g.cols();
                let mut dv = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, x) in dv.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *v, Tensor::row(dv));
            }
            Op::AddScalar(a, s) => {
                self.accumulate(grads, *a, g.clone());
                let shape = self.value(*s).shape().to_vec();
                self.accumulate(grads, *s, Tensor::filled(&shape, g.sum()));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::PassThrough(a) => self.accumulate(grads, *a, g.clone()),
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, mat(g.rows(), w, d));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.nodes[p.0].requires_grad {
                        let d = g.data()[offset * n..(offset + r) * n].to_vec();
                        self.accumulate(grads, p, mat(r, n, d));
                    }
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let (n, w) = (ta.cols(), g.cols());
                let mut d = vec![0.0; ta.len()];
                for r in 0..g.rows() {
                    d[r * n + start..r * n + start + w].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *a, mat(ta.rows(), n, d));
            }
            Op::RepeatRows(a) => {
                let n = g.cols();
                let mut d = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (x, v) in d.iter_mut().zip(row) {
                        *x += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::row(d));
            }
            Op::GatherRows(table, ids) => {
                let tt = self.value(*table);
                let n = tt.cols();
                let mut d = vec![0.0; tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (x, v) in d[id * n..(id + 1) * n].iter_mut().zip(g.row_slice(r)) {
                        *x += v;
                    }
                }
                self.accumulate(grads, *table, mat(tt.rows(), n, d));
            }
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    d.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                self.accumulate(grads, *a, mat(y.rows(), n, d));
            }
            Op::LogSoftmaxRows(a) => {
                let n = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let gs: f64 = gr.iter().sum();
                    d.extend(yr.iter().zip(gr).map(|(ly, q)| q - ly.exp() * gs));
                }
                self.accumulate(grads, *a, mat(y.rows(), n, d));
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Ln(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gv, xv| gv / xv));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gv, xv| 2.0 * gv * xv));
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)))
            }
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g.zip_map(x, |gv, xv| {
                    let t = fast_tanh(GELU_C * (xv + GELU_A * xv * xv * xv));
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                    gv * (0.5 * (1.0 + t) + 0.5 * xv * dt)
                });
                self.accumulate(grads, *a, d);
            }
            Op::Recip(a) => self.accumulate(grads, *a, g.zip_map(y, |gv, yv| -gv * yv * yv)),
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.item()));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let shape = t.shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.item() / t.len() as f64));
            }
            Op::RowSums(a) => {
                let t = self.value(*a);
                let n = t.cols();
                let mut d = Vec::with_capacity(t.len());
                for r in 0..t.rows() {
                    d.extend(std::iter::repeat_n(g.data()[r], n));
                }
                self.accumulate(grads, *a, mat(t.rows(), n, d));
            }
            Op::PairwiseDiff(s) => {
                let k = g.rows();
                let mut d = vec![0.0; k];
                for j in 0..k {
                    for l in 0..k {
                        let v = g.data()[j * k + l];
                        d[l] += v;
                        d[j] -= v;
                    }
                }
                self.accumulate(grads, *s, Tensor::row(d));
            }
            Op::LayerNormRows { x, gain, bias, inv_std } => {
                let tx = self.value(*x);
                let tg = self.value(*gain);
                let n = tx.cols();
                let mut dx = Vec::with_capacity(tx.len());
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..tx.rows() {
                    let row = tx.row_slice(r);
                    let gr = g.row_slice(r);
                    let mu = row.iter().sum::<f64>() / n as f64;
                    let is = inv_std[r];
                    for c in 0..n {
                        xhat[c] = (row[c] - mu) * is;
                        dxhat[c] = gr[c] * tg.data()[c];
                        dgain[c] += gr[c] * xhat[c];
                        dbias[c] += gr[c];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        dx.push(is * (dxhat[c] - m1 - xhat[c] * m2));
                    }
                }
                self.accumulate(grads, *x, mat(tx.rows(), n, dx));
                let gshape = tg.shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::new(gshape, dgain).expect("gain shape"));
                self.accumulate(grads, *bias, Tensor::new(bshape, dbias).expect("bias shape"));
            }
            Op::SegmentPool { table, w, ids, offsets, alphas } => {
                // with a_j = g·h_j and c_j = α_j (a_j − g·p):
                // dh_j = α_j g + c_j w,  dw = Σ_j c_j h_j
                let (tt, tw) = (self.value(*table), self.value(*w));
                let n = tt.cols();
                let wv = tw.data();
                let mut dt = vec![0.0; tt.len()];
                let mut dw = vec![0.0; n];
                for (s, win) in offsets.windows(2).enumerate() {
                    let (gr, pr) = (g.row_slice(s), y.row_slice(s));
                    let gp: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for j in win[0]..win[1] {
                        let h = tt.row_slice(ids[j]);
                        let aj = alphas[j];
                        let c = aj * (h.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() - gp);
                        let row = &mut dt[ids[j] * n..(ids[j] + 1) * n];
                        for col in 0..n {
                            row[col] += aj * gr[col] + c * wv[col];
                            dw[col] += c * h[col];
                        }
                    }
                }
                let (tr, wshape) = (tt.rows(), tw.shape().to_vec());
                if self.nodes[table.0].requires_grad {
                    self.accumulate(grads, *table, mat(tr, n, dt));
                }
                if self.nodes[w.0].requires_grad {
                    self.accumulate(grads, *w, Tensor::new(wshape, dw).expect("pool shape"));
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (r, (yr, gr)) in y.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / norms[r]));
                }
                self.accumulate(grads, *x, mat(y.rows(), n, d));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax, in place.
/// `tanh` through one `exp`; within a few ulps of `f64::tanh` and about
/// three times faster.
pub fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}
