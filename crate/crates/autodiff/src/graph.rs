//! The computation graph (tape) and its primitive operations.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its backward rule. [`Graph::backward`] walks the nodes in
//! reverse insertion order, which is a valid reverse topological order
//! because a node can only reference earlier nodes.

use crate::array::Array;
use crate::error::{AdError, AdResult};
use crate::kernels::{self, broadcast_shape, broadcast_strides, for_each_broadcast, gemm};
use crate::sparse::CsrMatrix;
use std::fmt;
use std::rc::Rc;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-defined differentiable operation. The caller computes the forward
/// value and registers it with [`Graph::custom`]; the op supplies the
/// vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input, in input order. `None` means
    /// the input receives no gradient.
    fn backward(&self, inputs: &[&Array], output: &Array, grad: &Array) -> Vec<Option<Array>>;
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    RowSoftmax(Var),
    LogSoftmax(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { a: Var, axis: usize },
    MaskedFill { a: Var, mask: Rc<[bool]> },
    GatherRows { a: Var, index: Rc<[usize]> },
    ScatterAddRows { a: Var, index: Rc<[usize]> },
    SegmentSoftmax { a: Var, segment: Rc<[usize]>, n_segments: usize },
    SpMM { matrix: Rc<CsrMatrix>, a: Var },
    AttentionPool { q: Var, k: Var, v: Var, bias: Option<Var>, scale: f64, probs: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, targets: Rc<[usize]>, weights: Rc<[f64]>, probs: Vec<f64> },
    Custom { op: Rc<dyn CustomOp>, inputs: Vec<Var> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::RowSoftmax(_) => "row_softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaskedFill { .. } => "masked_fill",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::SpMM { .. } => "spmm",
            Op::AttentionPool { .. } => "attention_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`] for leaf nodes.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` when the loss does not depend
    /// on it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Array {
        self.get(var).cloned().unwrap_or_else(|| Array::zeros(shape))
    }
}

/// A single-use computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf (a parameter).
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product. Supported patterns: `[m,k]·[k,n]`, `[b,m,k]·[k,n]`
    /// (shared right operand) and `[b,m,k]·[b,k,n]` (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || AdError::Shape { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        let value = match (sa.len(), sb.len()) {
            (2, 2) | (3, 2) => {
                let k = sa[sa.len() - 1];
                if sb[0] != k {
                    return Err(err());
                }
                let m: usize = sa[..sa.len() - 1].iter().product();
                let n = sb[1];
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
                let mut shape = sa[..sa.len() - 1].to_vec();
                shape.push(n);
                Array::new(&shape, out)?
            }
            (3, 3) => {
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                if sb[0] != batch || sb[1] != k {
                    return Err(err());
                }
                let n = sb[2];
                let mut out = vec![0.0; batch * m * n];
                let (da, db) = (self.value(a).data(), self.value(b).data());
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        1.0,
                        &da[i * m * k..(i + 1) * m * k],
                        false,
                        &db[i * k * n..(i + 1) * k * n],
                        false,
                        0.0,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
                Array::new(&[batch, m, n], out)?
            }
            _ => return Err(err()),
        };
        Ok(self.derived(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Swaps the last two axes (rank 2 or 3).
    pub fn transpose(&mut self, a: Var) -> AdResult<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(AdError::InvalidShape { op: "transpose", shape, reason: "needs rank 2 or 3" });
        }
        let value = transpose_last2(self.value(a));
        Ok(self.derived(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> AdResult<Var> {
        let value = self.value(a).reshaped(shape).map_err(|_| AdError::Shape {
            op: "reshape",
            lhs: self.shape(a).to_vec(),
            rhs: shape.to_vec(),
        })?;
        Ok(self.derived(value, Op::Reshape(a), &[a]))
    }

    // ---------------------------------------------------------------- elementwise binary

    pub fn add(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.derived(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    fn broadcast_binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> AdResult<Array> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            return Ok(va.zip_map(vb, f));
        }
        let out_shape = broadcast_shape(op, va.shape(), vb.shape())?;
        let total: usize = out_shape.iter().product();
        // one operand tiles the output periodically
        if total == va.len() && is_suffix(vb.shape(), va.shape()) {
            let (da, db) = (va.data(), vb.data());
            let mut data = Vec::with_capacity(total);
            for c in da.chunks(db.len().max(1)) {
                data.extend(c.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
            return Array::new(&out_shape, data);
        }
        if total == vb.len() && is_suffix(va.shape(), vb.shape()) {
            let (da, db) = (va.data(), vb.data());
            let mut data = Vec::with_capacity(total);
            for c in db.chunks(da.len().max(1)) {
                data.extend(da.iter().zip(c).map(|(&x, &y)| f(x, y)));
            }
            return Array::new(&out_shape, data);
        }
        let sa = broadcast_strides(va.shape(), &out_shape);
        let sb = broadcast_strides(vb.shape(), &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        let (da, db) = (va.data(), vb.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        Array::new(&out_shape, out)
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.derived(value, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> AdResult<Var> {
        let first = parts.first().ok_or_else(|| AdError::Invalid("concat of zero arrays".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AdError::InvalidShape { op: "concat", shape: base, reason: "axis out of range" });
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !compatible {
                return Err(AdError::Shape { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total_axis += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let value = Array::new(&shape, out)?;
        Ok(self.derived(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    // ---------------------------------------------------------------- elementwise unary

    /// Softmax over the last axis.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let width = va.last_dim();
        let mut out = vec![0.0; va.len()];
        if width > 0 {
            for (src, dst) in va.data().chunks(width).zip(out.chunks_mut(width)) {
                kernels::softmax_into(src, dst);
            }
        }
        let value = Array::new(va.shape(), out).expect("same shape");
        self.derived(value, Op::RowSoftmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let width = va.last_dim();
        let mut out = va.data().to_vec();
        if width > 0 {
            for row in out.chunks_mut(width) {
                let lse = kernels::log_sum_exp(row);
                row.iter_mut().for_each(|x| *x -= lse);
            }
        }
        let value = Array::new(va.shape(), out).expect("same shape");
        self.derived(value, Op::LogSoftmax(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, move |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, kernels::softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.derived(value, op, &[a])
    }

    // ---------------------------------------------------------------- reductions

    /// Sum of all elements, as a rank-0 array.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array::scalar(self.value(a).sum());
        self.derived(value, Op::Sum(a), &[a])
    }

    /// Mean of all elements, as a rank-0 array.
    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Array::scalar(va.sum() / va.len() as f64);
        self.derived(value, Op::Mean(a), &[a])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> AdResult<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AdError::InvalidShape { op: "sum_axis", shape, reason: "axis out of range" });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Array::new(&out_shape, out)?;
        Ok(self.derived(value, Op::SumAxis { a, axis }, &[a]))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> AdResult<Var> {
        let n = *self.shape(a).get(axis).ok_or(AdError::InvalidShape {
            op: "mean_axis",
            shape: self.shape(a).to_vec(),
            reason: "axis out of range",
        })?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    // ---------------------------------------------------------------- masking and indexing

    /// Replaces entries where `mask` is true by `fill`; those entries receive
    /// no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> AdResult<Var> {
        let va = self.value(a);
        if mask.len() != va.len() {
            return Err(AdError::Shape { op: "masked_fill", lhs: va.shape().to_vec(), rhs: vec![mask.len()] });
        }
        let data = va.data().iter().zip(mask).map(|(&x, &m)| if m { fill } else { x }).collect();
        let value = Array::new(va.shape(), data)?;
        Ok(self.derived(value, Op::MaskedFill { a, mask: mask.into() }, &[a]))
    }

    /// Selects rows of a rank-1 or rank-2 array: `out[e] = a[index[e]]`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> AdResult<Var> {
        let va = self.value(a);
        let (rows, width) = row_view("gather_rows", va)?;
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index.iter() {
            if i >= rows {
                return Err(AdError::Index { op: "gather_rows", index: i, len: rows });
            }
            out.extend_from_slice(&va.data()[i * width..(i + 1) * width]);
        }
        let shape = if va.ndim() == 1 { vec![index.len()] } else { vec![index.len(), width] };
        let value = Array::new(&shape, out)?;
        Ok(self.derived(value, Op::GatherRows { a, index }, &[a]))
    }

    /// Sums rows into `n` buckets: `out[index[e]] += a[e]`.
    pub fn scatter_add_rows(&mut self, a: Var, index: Rc<[usize]>, n: usize) -> AdResult<Var> {
        let va = self.value(a);
        let (rows, width) = row_view("scatter_add_rows", va)?;
        if rows != index.len() {
            return Err(AdError::Shape { op: "scatter_add_rows", lhs: va.shape().to_vec(), rhs: vec![index.len()] });
        }
        let mut out = vec![0.0; n * width];
        for (e, &i) in index.iter().enumerate() {
            if i >= n {
                return Err(AdError::Index { op: "scatter_add_rows", index: i, len: n });
            }
            for (o, x) in out[i * width..(i + 1) * width].iter_mut().zip(&va.data()[e * width..(e + 1) * width]) {
                *o += x;
            }
        }
        let shape = if va.ndim() == 1 { vec![n] } else { vec![n, width] };
        let value = Array::new(&shape, out)?;
        Ok(self.derived(value, Op::ScatterAddRows { a, index }, &[a]))
    }

    /// Softmax of a rank-1 array within groups given by `segment`.
    pub fn segment_softmax(&mut self, a: Var, segment: Rc<[usize]>, n_segments: usize) -> AdResult<Var> {
        let va = self.value(a);
        if va.ndim() != 1 || va.len() != segment.len() {
            return Err(AdError::Shape { op: "segment_softmax", lhs: va.shape().to_vec(), rhs: vec![segment.len()] });
        }
        let x = va.data();
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (e, &s) in segment.iter().enumerate() {
            if s >= n_segments {
                return Err(AdError::Index { op: "segment_softmax", index: s, len: n_segments });
            }
            max[s] = max[s].max(x[e]);
        }
        let mut out: Vec<f64> = segment.iter().enumerate().map(|(e, &s)| (x[e] - max[s]).exp()).collect();
        let mut total = vec![0.0; n_segments];
        for (e, &s) in segment.iter().enumerate() {
            total[s] += out[e];
        }
        for (e, &s) in segment.iter().enumerate() {
            out[e] /= total[s];
        }
        let value = Array::vector(out);
        Ok(self.derived(value, Op::SegmentSoftmax { a, segment, n_segments }, &[a]))
    }

    /// Product of a constant sparse matrix with a rank-1 or rank-2 array.
    pub fn spmm(&mut self, matrix: Rc<CsrMatrix>, a: Var) -> AdResult<Var> {
        let va = self.value(a);
        let (rows, width) = row_view("spmm", va)?;
        if rows != matrix.n_cols() {
            return Err(AdError::Shape {
                op: "spmm",
                lhs: vec![matrix.n_rows(), matrix.n_cols()],
                rhs: va.shape().to_vec(),
            });
        }
        let out = matrix.matmul_dense(va.data(), width);
        let shape = if va.ndim() == 1 { vec![matrix.n_rows()] } else { vec![matrix.n_rows(), width] };
        let value = Array::new(&shape, out)?;
        Ok(self.derived(value, Op::SpMM { matrix, a }, &[a]))
    }

    // ---------------------------------------------------------------- fused ops

    /// Mean-pooled biased self-attention. `q`, `k`, `v` are `[batch, t, d]`
    /// and `bias` (optional) is `[batch, t]`, added along the key axis of
    /// every query row:
    ///
    /// `out[b] = mean_q softmax_k(scale * q[b] k[b]^T + bias[b])[q, :] · v[b]`
    ///
    /// giving `[batch, d]`.
    pub fn attention_pool(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, scale: f64) -> AdResult<Var> {
        let sq = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != sq.as_slice() {
                return Err(AdError::Shape { op: "attention_pool", lhs: sq, rhs: self.shape(other).to_vec() });
            }
        }
        if sq.len() != 3 {
            return Err(AdError::InvalidShape { op: "attention_pool", shape: sq, reason: "expected [batch, t, d]" });
        }
        let (batch, t, d) = (sq[0], sq[1], sq[2]);
        if let Some(b) = bias {
            if self.shape(b) != [batch, t] {
                return Err(AdError::Shape { op: "attention_pool", lhs: sq, rhs: self.shape(b).to_vec() });
            }
        }
        let mut probs = vec![0.0; batch * t * t];
        let mut out = vec![0.0; batch * d];
        let (dq, dk, dv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let bias_data = bias.map(|b| self.value(b).data());
        let mut pooled = vec![0.0; t];
        for i in 0..batch {
            let block = i * t * d..(i + 1) * t * d;
            let p = &mut probs[i * t * t..(i + 1) * t * t];
            attention_probs_into(
                &dq[block.clone()],
                &dk[block.clone()],
                bias_data.map(|bd| &bd[i * t..(i + 1) * t]),
                t,
                d,
                scale,
                p,
            );
            kernels::column_means(p, t, &mut pooled);
            gemm(1, t, d, 1.0, &pooled, false, &dv[block], false, 0.0, &mut out[i * d..(i + 1) * d]);
        }
        let value = Array::new(&[batch, d], out)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        Ok(self.derived(value, Op::AttentionPool { q, k, v, bias, scale, probs }, &inputs))
    }

    /// Weighted mean cross-entropy of `[n, c]` logits against class indices.
    /// Rows with zero weight do not contribute. Returns a rank-0 array.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> AdResult<Var> {
        let vl = self.value(logits);
        if vl.ndim() != 2 || vl.shape()[0] != targets.len() || targets.len() != weights.len() {
            return Err(AdError::Shape {
                op: "softmax_cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let c = vl.shape()[1];
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(AdError::Invalid("softmax_cross_entropy: total weight must be positive".into()));
        }
        let mut probs = vec![0.0; vl.len()];
        let mut loss = 0.0;
        for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            if y >= c {
                return Err(AdError::Index { op: "softmax_cross_entropy", index: y, len: c });
            }
            let row = vl.row(i);
            kernels::softmax_into(row, &mut probs[i * c..(i + 1) * c]);
            if w != 0.0 {
                loss += w * (kernels::log_sum_exp(row) - row[y]);
            }
        }
        let value = Array::scalar(loss / total_weight);
        let op = Op::SoftmaxCrossEntropy { logits, targets: targets.into(), weights: weights.into(), probs };
        Ok(self.derived(value, op, &[logits]))
    }

    /// Registers the output of a [`CustomOp`].
    pub fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Var], output: Array) -> Var {
        self.derived(output, Op::Custom { op, inputs: inputs.to_vec() }, inputs)
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode accumulation from a scalar `loss`. Returns gradients for
    /// every leaf that requires them and is reachable from `loss`.
    pub fn backward(&self, loss: Var) -> AdResult<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(AdError::NonScalarLoss { shape: shape.to_vec() });
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(shape, 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            self.backward_node(node, &grad, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], target: Var, contribution: Array) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        debug_assert_eq!(contribution.shape(), self.shape(target), "gradient shape for {:?}", target);
        match &mut grads[target.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) -> AdResult<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                if sb.len() == 2 {
                    let k = sa[sa.len() - 1];
                    let m = va.len() / k;
                    let n = sb[1];
                    if self.wants(*a) {
                        let mut ga = vec![0.0; va.len()];
                        gemm(m, n, k, 1.0, g.data(), false, vb.data(), true, 0.0, &mut ga);
                        self.accumulate(grads, *a, Array::new(sa, ga)?);
                    }
                    if self.wants(*b) {
                        let mut gb = vec![0.0; vb.len()];
                        gemm(k, m, n, 1.0, va.data(), true, g.data(), false, 0.0, &mut gb);
                        self.accumulate(grads, *b, Array::new(sb, gb)?);
                    }
                } else {
                    let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    if self.wants(*a) {
                        let mut ga = vec![0.0; va.len()];
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                1.0,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                false,
                                &vb.data()[i * k * n..(i + 1) * k * n],
                                true,
                                0.0,
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                        self.accumulate(grads, *a, Array::new(sa, ga)?);
                    }
                    if self.wants(*b) {
                        let mut gb = vec![0.0; vb.len()];
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                1.0,
                                &va.data()[i * m * k..(i + 1) * m * k],
                                true,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                false,
                                0.0,
                                &mut gb[i * k * n..(i + 1) * k * n],
                            );
                        }
                        self.accumulate(grads, *b, Array::new(sb, gb)?);
                    }
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, transpose_last2(g)),
            Op::Reshape(a) => {
                let ga = g.reshaped(self.shape(*a))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    self.accumulate(grads, *a, reduce_to_shape(g, self.shape(*a)));
                }
                if self.wants(*b) {
                    let mut gb = reduce_to_shape(g, self.shape(*b));
                    if sign < 0.0 {
                        gb.data_mut().iter_mut().for_each(|x| *x = -*x);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if va.shape() == vb.shape() {
                    if self.wants(*a) {
                        self.accumulate(grads, *a, g.zip_map(vb, |x, y| x * y));
                    }
                    if self.wants(*b) {
                        self.accumulate(grads, *b, g.zip_map(va, |x, y| x * y));
                    }
                } else {
                    let sa = broadcast_strides(va.shape(), out.shape());
                    let sb = broadcast_strides(vb.shape(), out.shape());
                    let mut ga = vec![0.0; va.len()];
                    let mut gb = vec![0.0; vb.len()];
                    let (da, db, dg) = (va.data(), vb.data(), g.data());
                    for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                        ga[ia] += dg[o] * db[ib];
                        gb[ib] += dg[o] * da[ia];
                    });
                    if self.wants(*a) {
                        self.accumulate(grads, *a, Array::new(va.shape(), ga)?);
                    }
                    if self.wants(*b) {
                        self.accumulate(grads, *b, Array::new(vb.shape(), gb)?);
                    }
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let chunk = ps[*axis] * inner;
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gp.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accumulate(grads, p, Array::new(ps, gp)?);
                    }
                    offset += chunk;
                }
            }
            Op::RowSoftmax(a) => {
                let width = out.last_dim();
                let mut ga = vec![0.0; out.len()];
                for ((y, gy), dst) in out.data().chunks(width).zip(g.data().chunks(width)).zip(ga.chunks_mut(width)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(gy) {
                        *d = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *a, Array::new(out.shape(), ga)?);
            }
            Op::LogSoftmax(a) => {
                let width = out.last_dim();
                let mut ga = vec![0.0; out.len()];
                for ((y, gy), dst) in out.data().chunks(width).zip(g.data().chunks(width)).zip(ga.chunks_mut(width)) {
                    let total: f64 = gy.iter().sum();
                    for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(gy) {
                        *d = gi - yi.exp() * total;
                    }
                }
                self.accumulate(grads, *a, Array::new(out.shape(), ga)?);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(out, |gi, y| gi * (1.0 - y * y))),
            Op::Relu(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(va, |gi, x| if x > 0.0 { gi } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(va, |gi, x| if x > 0.0 { gi } else { slope * gi }));
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |gi, y| gi * y)),
            Op::Log(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(va, |gi, x| gi / x));
            }
            Op::Softplus(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(va, |gi, x| gi * kernels::sigmoid(x)));
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(out, |gi, y| gi * y * (1.0 - y))),
            Op::Square(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(va, |gi, x| 2.0 * gi * x));
            }
            Op::Sum(a) => {
                let gi = g.item();
                self.accumulate(grads, *a, Array::full(self.shape(*a), gi));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gi = g.item() / n;
                self.accumulate(grads, *a, Array::full(self.shape(*a), gi));
            }
            Op::SumAxis { a, axis } => {
                let shape = self.shape(*a);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let n = shape[*axis];
                let mut ga = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        ga[base..base + inner].copy_from_slice(src);
                    }
                }
                self.accumulate(grads, *a, Array::new(shape, ga)?);
            }
            Op::MaskedFill { a, mask } => {
                let data = g.data().iter().zip(mask.iter()).map(|(&x, &m)| if m { 0.0 } else { x }).collect();
                self.accumulate(grads, *a, Array::new(g.shape(), data)?);
            }
            Op::GatherRows { a, index } => {
                let va = self.value(*a);
                let (_, width) = row_view("gather_rows", va)?;
                let mut ga = vec![0.0; va.len()];
                for (e, &i) in index.iter().enumerate() {
                    for (d, s) in ga[i * width..(i + 1) * width].iter_mut().zip(&g.data()[e * width..(e + 1) * width]) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, Array::new(va.shape(), ga)?);
            }
            Op::ScatterAddRows { a, index } => {
                let va = self.value(*a);
                let (_, width) = row_view("scatter_add_rows", va)?;
                let mut ga = Vec::with_capacity(va.len());
                for &i in index.iter() {
                    ga.extend_from_slice(&g.data()[i * width..(i + 1) * width]);
                }
                self.accumulate(grads, *a, Array::new(va.shape(), ga)?);
            }
            Op::SegmentSoftmax { a, segment, n_segments } => {
                let y = out.data();
                let mut dot = vec![0.0; *n_segments];
                for (e, &s) in segment.iter().enumerate() {
                    dot[s] += y[e] * g.data()[e];
                }
                let ga = segment.iter().enumerate().map(|(e, &s)| y[e] * (g.data()[e] - dot[s])).collect();
                self.accumulate(grads, *a, Array::vector(ga));
            }
            Op::SpMM { matrix, a } => {
                let va = self.value(*a);
                let (_, width) = row_view("spmm", va)?;
                let ga = matrix.transpose_matmul_dense(g.data(), width);
                self.accumulate(grads, *a, Array::new(va.shape(), ga)?);
            }
            Op::AttentionPool { q, k, v, bias, scale, probs } => {
                self.attention_pool_backward(*q, *k, *v, *bias, *scale, probs, g, grads)?;
            }
            Op::SoftmaxCrossEntropy { logits, targets, weights, probs } => {
                let c = self.shape(*logits)[1];
                let total: f64 = weights.iter().sum();
                let gi = g.item();
                let mut gl = vec![0.0; probs.len()];
                for (i, (&y, &w)) in targets.iter().zip(weights.iter()).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let f = gi * w / total;
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gl[i * c + j] = f * (probs[i * c + j] - onehot);
                    }
                }
                self.accumulate(grads, *logits, Array::new(self.shape(*logits), gl)?);
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Array> = inputs.iter().map(|&v| self.value(v)).collect();
                let contributions = op.backward(&values, out, g);
                if contributions.len() != inputs.len() {
                    return Err(AdError::Invalid(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        contributions.len(),
                        inputs.len()
                    )));
                }
                for (&input, contribution) in inputs.iter().zip(contributions) {
                    if let Some(c) = contribution {
                        if c.shape() != self.shape(input) {
                            return Err(AdError::Shape {
                                op: op.name(),
                                lhs: self.shape(input).to_vec(),
                                rhs: c.shape().to_vec(),
                            });
                        }
                        self.accumulate(grads, input, c);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_pool_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        scale: f64,
        probs: &[f64],
        g: &Array,
        grads: &mut [Option<Array>],
    ) -> AdResult<()> {
        let shape = self.shape(q).to_vec();
        let (batch, t, d) = (shape[0], shape[1], shape[2]);
        let (dq, dk, dv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; dq.len()];
        let mut gk = vec![0.0; dk.len()];
        let mut gv = vec![0.0; dv.len()];
        let mut gbias = vec![0.0; batch * t];
        let mut pooled = vec![0.0; t];
        let mut d_pooled = vec![0.0; t];
        let mut ds = vec![0.0; t * t];
        for i in 0..batch {
            let block = i * t * d..(i + 1) * t * d;
            let p = &probs[i * t * t..(i + 1) * t * t];
            let gi = &g.data()[i * d..(i + 1) * d];
            kernels::column_means(p, t, &mut pooled);
            // d pooled[key] = v[key] . g
            gemm(t, d, 1, 1.0, &dv[block.clone()], false, gi, false, 0.0, &mut d_pooled);
            // dv[key] = pooled[key] * g
            gemm(t, 1, d, 1.0, &pooled, false, gi, false, 0.0, &mut gv[block.clone()]);
            // every query row sees the same upstream d_pooled / t
            let gb = bias.map(|_| &mut gbias[i * t..(i + 1) * t]);
            kernels::pooled_softmax_backward(p, &d_pooled, t, &mut ds, gb);
            gemm(t, t, d, scale, &ds, false, &dk[block.clone()], false, 0.0, &mut gq[block.clone()]);
            gemm(t, t, d, scale, &ds, true, &dq[block.clone()], false, 0.0, &mut gk[block]);
        }
        self.accumulate(grads, q, Array::new(&shape, gq)?);
        self.accumulate(grads, k, Array::new(&shape, gk)?);
        self.accumulate(grads, v, Array::new(&shape, gv)?);
        if let Some(b) = bias {
            self.accumulate(grads, b, Array::new(&[batch, t], gbias)?);
        }
        Ok(())
    }
}

/// Softmax-normalized attention weights `softmax(scale * q k^T + bias)` for
/// one `[t, d]` block, written row-major into `out` (`t * t`).
pub fn attention_probs_into(
    q: &[f64],
    k: &[f64],
    bias: Option<&[f64]>,
    t: usize,
    d: usize,
    scale: f64,
    out: &mut [f64],
) {
    gemm(t, d, t, scale, q, false, k, true, 0.0, out);
    kernels::softmax_rows_biased(out, t, bias);
}

fn row_view(op: &'static str, a: &Array) -> AdResult<(usize, usize)> {
    match a.shape() {
        [n] => Ok((*n, 1)),
        [n, w] => Ok((*n, *w)),
        s => Err(AdError::InvalidShape { op, shape: s.to_vec(), reason: "expected rank 1 or 2" }),
    }
}

fn transpose_last2(a: &Array) -> Array {
    let shape = a.shape();
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = a.len() / (m * n).max(1);
    let mut out = vec![0.0; a.len()];
    for b in 0..batch {
        let src = &a.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(r - 2, r - 1);
    Array::new(&new_shape, out).expect("transpose preserves length")
}

/// True when `small`, with leading size-1 axes dropped, equals the trailing
/// axes of `big`, so that `small` repeats with period `small.len()`.
fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    let trimmed: &[usize] = {
        let lead = small.iter().take_while(|&&d| d == 1).count();
        &small[lead..]
    };
    trimmed.len() <= big.len() && big[big.len() - trimmed.len()..] == *trimmed
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to_shape(g: &Array, shape: &[usize]) -> Array {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    if n > 0 && is_suffix(shape, g.shape()) {
        let mut out = vec![0.0; n];
        for chunk in g.data().chunks(n) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        return Array::new(shape, out).expect("reduced shape matches");
    }
    let gs = broadcast_strides(g.shape(), g.shape());
    let ts = broadcast_strides(shape, g.shape());
    let mut out = vec![0.0; shape.iter().product()];
    let dg = g.data();
    for_each_broadcast(g.shape(), &gs, &ts, |o, _, it| out[it] += dg[o]);
    Array::new(shape, out).expect("reduced shape matches")
}
