use std::sync::Arc;

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction used by [`Graph::segment_pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sqrt(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExpRows(Var, Option<Arc<[bool]>>),
    LayerNorm { x: Var, inv_std: Vec<T> },
    NormalizeRows { x: Var, norms: Vec<T> },
    Sum(Var),
    Mean(Var),
    SegmentPool {
        x: Var,
        segments: Arc<[(usize, usize)]>,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &Tensor<impl Float>, b: &Tensor<impl Float>) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Turns the per-op finiteness check on or off. It defaults to on in
    /// debug builds.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var], name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.cols != bv.rows {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = Tensor::zeros(av.rows, bv.cols);
        gemm_nn(&av.data, &bv.data, &mut out.data, av.rows, av.cols, bv.cols);
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.cols != bv.cols {
            return Err(mismatch("matmul_nt", av, bv));
        }
        let mut out = Tensor::zeros(av.rows, bv.rows);
        gemm_nt(&av.data, &bv.data, &mut out.data, av.rows, av.cols, bv.rows);
        self.push(out, Op::MatMulNt(a, b), &[a, b], "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).transpose();
        self.push(out, Op::Transpose(a), &[a], "transpose")
    }

    // ---- elementwise binary ---------------------------------------------

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, av, bv));
        }
        Ok(Tensor {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    fn check_row(&self, a: Var, row: Var, op: &'static str) -> Result<()> {
        let (av, rv) = (self.val(a), self.val(row));
        if rv.rows != 1 || rv.cols != av.cols {
            return Err(mismatch(op, av, rv));
        }
        Ok(())
    }

    /// Adds a `1×m` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "add_row")?;
        let mut out = self.val(a).clone();
        let r = &self.val(row).data;
        for chunk in out.data.chunks_exact_mut(r.len().max(1)) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row], "add_row")
    }

    /// Multiplies every row of `a` elementwise by a `1×m` row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "mul_row")?;
        let mut out = self.val(a).clone();
        let r = &self.val(row).data;
        for chunk in out.data.chunks_exact_mut(r.len().max(1)) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row), &[a, row], "mul_row")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.val(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.val(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a], "add_scalar")
    }

    // ---- structural -------------------------------------------------------

    /// Concatenates along the channel (column) dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = self.val(*first).rows;
        for p in parts {
            if self.val(*p).rows != rows {
                return Err(mismatch("concat_cols", self.val(*first), self.val(*p)));
            }
        }
        let cols: usize = parts.iter().map(|p| self.val(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.val(*p).row(r));
            }
        }
        let out = Tensor { rows, cols, data };
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.val(a);
        if start + len > av.cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![start, start + len],
            });
        }
        let out = Tensor::from_fn(av.rows, len, |r, c| av.get(r, start + c));
        self.push(out, Op::SliceCols(a, start), &[a], "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = self.val(*first).cols;
        for p in parts {
            if self.val(*p).cols != cols {
                return Err(mismatch("concat_rows", self.val(*first), self.val(*p)));
            }
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.val(*p).data);
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor { rows, cols, data };
        self.push(out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, idx.into())
    }

    /// `out[i] = a[indices[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: Arc<[usize]>) -> Result<Var> {
        let av = self.val(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.rows) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(indices.len() * av.cols);
        for &i in indices.iter() {
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor {
            rows: indices.len(),
            cols: av.cols,
            data,
        };
        self.push(out, Op::GatherRows(a, indices), &[a], "gather_rows")
    }

    // ---- elementwise unary ------------------------------------------------

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), &[a], "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a], "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(T::exp);
        self.push(out, Op::Exp(a), &[a], "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(T::ln);
        self.push(out, Op::Log(a), &[a], "log")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(T::abs);
        self.push(out, Op::Abs(a), &[a], "abs")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(T::sqrt);
        self.push(out, Op::Sqrt(a), &[a], "sqrt")
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a], "softplus")
    }

    /// Gradient flows only where `lo < x < hi`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.val(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a], "clamp")
    }

    // ---- row-wise ---------------------------------------------------------

    /// Softmax over the last dimension, with per-row max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a);
        let mut out = av.clone();
        for row in out.data.chunks_exact_mut(av.cols.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::Softmax(a), &[a], "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a);
        let mut out = av.clone();
        for row in out.data.chunks_exact_mut(av.cols.max(1)) {
            let lse = logsumexp(row.iter().copied());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(a), &[a], "log_softmax")
    }

    /// Per-row `log Σ exp` over the entries where `mask` is true (all entries
    /// when `mask` is `None`). Returns an `n×1` column. A row with no selected
    /// entries yields `-inf`.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let av = self.val(a);
        if let Some(m) = &mask {
            if m.len() != av.len() {
                return Err(Error::ShapeMismatch {
                    op: "logsumexp_rows",
                    lhs: av.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let cols = av.cols;
        let data: Vec<T> = (0..av.rows)
            .map(|r| {
                let row = av.row(r);
                match &mask {
                    None => logsumexp(row.iter().copied()),
                    Some(m) => logsumexp(
                        row.iter()
                            .zip(&m[r * cols..(r + 1) * cols])
                            .filter(|(_, &keep)| keep)
                            .map(|(&v, _)| v),
                    ),
                }
            })
            .collect();
        let out = Tensor {
            rows: av.rows,
            cols: 1,
            data,
        };
        self.push(out, Op::LogSumExpRows(a, mask), &[a], "logsumexp_rows")
    }

    /// Normalises each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let av = self.val(a);
        let n = T::from_usize(av.cols).unwrap();
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows);
        for row in out.data.chunks_exact_mut(av.cols.max(1)) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std }, &[a], "layer_norm")
    }

    /// Scales each row to unit Euclidean norm (`x / max(‖x‖, eps)`).
    pub fn normalize_rows(&mut self, a: Var, eps: T) -> Result<Var> {
        let av = self.val(a);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows);
        for row in out.data.chunks_exact_mut(av.cols.max(1)) {
            let n = dot(row, row).sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::NormalizeRows { x: a, norms }, &[a], "normalize_rows")
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).data.iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a);
        if av.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s = av.data.iter().copied().sum::<T>() / T::from_usize(av.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(a), &[a], "mean")
    }

    /// Reduces each row segment `(start, len)` of `a` to one output row.
    pub fn segment_pool(&mut self, a: Var, segments: Arc<[(usize, usize)]>, kind: PoolKind) -> Result<Var> {
        let av = self.val(a);
        let cols = av.cols;
        let mut data = vec![T::zero(); segments.len() * cols];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0usize; segments.len() * cols];
        }
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > av.rows {
                return Err(Error::invalid(format!(
                    "segment_pool: segment {s} = ({start}, {len}) invalid for {} rows",
                    av.rows
                )));
            }
            let out = &mut data[s * cols..(s + 1) * cols];
            match kind {
                PoolKind::Mean => {
                    for r in start..start + len {
                        for (o, &v) in out.iter_mut().zip(av.row(r)) {
                            *o += v;
                        }
                    }
                    let inv = T::one() / T::from_usize(len).unwrap();
                    out.iter_mut().for_each(|o| *o *= inv);
                }
                PoolKind::Max => {
                    out.copy_from_slice(av.row(start));
                    let am = &mut argmax[s * cols..(s + 1) * cols];
                    am.iter_mut().for_each(|x| *x = start);
                    for r in start + 1..start + len {
                        for ((o, a_idx), &v) in out.iter_mut().zip(am.iter_mut()).zip(av.row(r)) {
                            if v > *o {
                                *o = v;
                                *a_idx = r;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor {
            rows: segments.len(),
            cols,
            data,
        };
        self.push(
            out,
            Op::SegmentPool {
                x: a,
                segments,
                kind,
                argmax,
            },
            &[a],
            "segment_pool",
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.val(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::ShapeMismatch {
                op: "backward (loss must be scalar)",
                lhs: lv.shape().to_vec(),
                rhs: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only leaves are interesting to callers, but intermediate gradients
        // are kept for debugging.
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Tensor<T>)| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                let s = self.nodes[v.0].value.shape();
                *slot = Some(Tensor::zeros(s[0], s[1]));
            }
            f(slot.as_mut().unwrap());
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, &mut |da| gemm_nt(&g.data, &bv.data, &mut da.data, av.rows, bv.cols, bv.rows));
                acc(*b, &mut |db| gemm_tn(&av.data, &g.data, &mut db.data, av.rows, av.cols, bv.cols));
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                // c = a bᵀ: da = g b, db = gᵀ a
                acc(*a, &mut |da| gemm_nn(&g.data, &bv.data, &mut da.data, av.rows, bv.rows, av.cols));
                acc(*b, &mut |db| gemm_tn(&g.data, &av.data, &mut db.data, av.rows, bv.rows, av.cols));
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                acc(*a, &mut |da| zip_acc(da, |k| gt.data[k]));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| zip_acc(da, |k| g.data[k]));
                acc(*b, &mut |db| zip_acc(db, |k| g.data[k]));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| zip_acc(da, |k| g.data[k]));
                acc(*b, &mut |db| zip_acc(db, |k| -g.data[k]));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, &mut |da| zip_acc(da, |k| g.data[k] * bv.data[k]));
                acc(*b, &mut |db| zip_acc(db, |k| g.data[k] * av.data[k]));
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |da| zip_acc(da, |k| g.data[k]));
                acc(*row, &mut |dr| {
                    for grow in g.data.chunks_exact(g.cols.max(1)) {
                        for (d, &v) in dr.data.iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.val(*a), self.val(*row));
                let cols = av.cols.max(1);
                acc(*a, &mut |da| zip_acc(da, |k| g.data[k] * rv.data[k % cols]));
                acc(*row, &mut |dr| {
                    for (grow, arow) in g.data.chunks_exact(cols).zip(av.data.chunks_exact(cols)) {
                        for ((d, &gv), &x) in dr.data.iter_mut().zip(grow).zip(arow) {
                            *d += gv * x;
                        }
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |da| zip_acc(da, |k| g.data[k] * *s)),
            Op::AddScalar(a) => acc(*a, &mut |da| zip_acc(da, |k| g.data[k])),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = self.val(*p).cols;
                    acc(*p, &mut |dp| {
                        for r in 0..dp.rows {
                            for c in 0..pc {
                                dp.data[r * pc + c] += g.get(r, offset + c);
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let cols = self.val(*a).cols;
                acc(*a, &mut |da| {
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            da.data[r * cols + start + c] += g.get(r, c);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.val(*p).len();
                    acc(*p, &mut |dp| {
                        for (d, &v) in dp.data.iter_mut().zip(&g.data[offset..offset + n]) {
                            *d += v;
                        }
                    });
                    offset += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let cols = g.cols;
                acc(*a, &mut |da| {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..cols {
                            da.data[src * cols + c] += g.data[r * cols + c];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.val(*a);
                acc(*a, &mut |da| {
                    zip_acc(da, |k| if av.data[k] > T::zero() { g.data[k] } else { T::zero() })
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |da| zip_acc(da, |k| g.data[k] * y.data[k] * (T::one() - y.data[k]))),
            Op::Exp(a) => acc(*a, &mut |da| zip_acc(da, |k| g.data[k] * y.data[k])),
            Op::Log(a) => {
                let av = self.val(*a);
                acc(*a, &mut |da| zip_acc(da, |k| g.data[k] / av.data[k]));
            }
            Op::Abs(a) => {
                let av = self.val(*a);
                acc(*a, &mut |da| {
                    zip_acc(da, |k| {
                        let x = av.data[k];
                        if x > T::zero() {
                            g.data[k]
                        } else if x < T::zero() {
                            -g.data[k]
                        } else {
                            T::zero()
                        }
                    })
                });
            }
            Op::Sqrt(a) => {
                let two = T::one() + T::one();
                acc(*a, &mut |da| zip_acc(da, |k| g.data[k] / (two * y.data[k])));
            }
            Op::Softplus(a) => {
                let av = self.val(*a);
                acc(*a, &mut |da| zip_acc(da, |k| g.data[k] * sigmoid(av.data[k])));
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.val(*a);
                acc(*a, &mut |da| {
                    zip_acc(da, |k| {
                        let x = av.data[k];
                        if x > *lo && x < *hi {
                            g.data[k]
                        } else {
                            T::zero()
                        }
                    })
                });
            }
            Op::Softmax(a) => {
                let cols = y.cols.max(1);
                acc(*a, &mut |da| {
                    for ((drow, grow), yrow) in da
                        .data
                        .chunks_exact_mut(cols)
                        .zip(g.data.chunks_exact(cols))
                        .zip(y.data.chunks_exact(cols))
                    {
                        let s = dot(grow, yrow);
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = y.cols.max(1);
                acc(*a, &mut |da| {
                    for ((drow, grow), yrow) in da
                        .data
                        .chunks_exact_mut(cols)
                        .zip(g.data.chunks_exact(cols))
                        .zip(y.data.chunks_exact(cols))
                    {
                        let s: T = grow.iter().copied().sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - yv.exp() * s;
                        }
                    }
                });
            }
            Op::LogSumExpRows(a, mask) => {
                let av = self.val(*a);
                let cols = av.cols;
                acc(*a, &mut |da| {
                    for r in 0..av.rows {
                        let lse = y.data[r];
                        if !lse.is_finite() {
                            continue;
                        }
                        for c in 0..cols {
                            let k = r * cols + c;
                            if mask.as_ref().map_or(true, |m| m[k]) {
                                da.data[k] += g.data[r] * (av.data[k] - lse).exp();
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = y.cols.max(1);
                let n = T::from_usize(y.cols).unwrap();
                acc(*x, &mut |dx| {
                    for (((drow, grow), yrow), &s) in dx
                        .data
                        .chunks_exact_mut(cols)
                        .zip(g.data.chunks_exact(cols))
                        .zip(y.data.chunks_exact(cols))
                        .zip(inv_std)
                    {
                        let mean_g = grow.iter().copied().sum::<T>() / n;
                        let mean_gy = dot(grow, yrow) / n;
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += s * (gv - mean_g - yv * mean_gy);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let cols = y.cols.max(1);
                acc(*x, &mut |dx| {
                    for (((drow, grow), yrow), &n) in dx
                        .data
                        .chunks_exact_mut(cols)
                        .zip(g.data.chunks_exact(cols))
                        .zip(y.data.chunks_exact(cols))
                        .zip(norms)
                    {
                        let gy = dot(grow, yrow);
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (gv - yv * gy) / n;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.item();
                acc(*a, &mut |da| da.data.iter_mut().for_each(|d| *d += gv));
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.val(*a).len()).unwrap();
                let gv = g.item() / n;
                acc(*a, &mut |da| da.data.iter_mut().for_each(|d| *d += gv));
            }
            Op::SegmentPool {
                x,
                segments,
                kind,
                argmax,
            } => {
                let cols = g.cols;
                acc(*x, &mut |dx| match kind {
                    PoolKind::Max => {
                        for (k, &src) in argmax.iter().enumerate() {
                            dx.data[src * cols + k % cols] += g.data[k];
                        }
                    }
                    PoolKind::Mean => {
                        for (s, &(start, len)) in segments.iter().enumerate() {
                            let inv = T::one() / T::from_usize(len).unwrap();
                            for r in start..start + len {
                                for c in 0..cols {
                                    dx.data[r * cols + c] += g.data[s * cols + c] * inv;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

/// `dst[k] += f(k)`; generic so the per-element closure is inlined.
#[inline]
fn zip_acc<T: Float, F: Fn(usize) -> T>(dst: &mut Tensor<T>, f: F) {
    for (k, d) in dst.data.iter_mut().enumerate() {
        *d += f(k);
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Float>(x: T) -> T {
    // ln(1 + eˣ) = max(x, 0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn logsumexp<T: Float>(vals: impl Iterator<Item = T> + Clone) -> T {
    let m = vals.clone().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<T>().ln()
}
