//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node whose parents precede it, so the node list
//! is a topological order and the backward pass is a single reverse sweep.

use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::memory::kernels;
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Reshape(Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    ConcatLast(Vec<Var>),
    SliceLast { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, inv_std: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Sum(Var),
    Rotary { x: Var, cos: Vec<T>, sin: Vec<T> },
    RelShift(Var),
    StackUpdate { stack: Var, actions: Var, value: Var },
    TapeWrite { cells: Var, head: Var, actions: Var, value: Var },
    TapeMove { head: Var, actions: Var, jumps: Vec<usize> },
    TapeRead { cells: Var, head: Var },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | MatMul(a, b) => vec![*a, *b],
            BatchMatMul { a, b, .. } => vec![*a, *b],
            Scale(x, _) | Tanh(x) | Sigmoid(x) | Relu(x) | Reshape(x) | Transpose(x) | Permute(x, _)
            | Softmax(x) | Sum(x) | RelShift(x) => vec![*x],
            SliceLast { x, .. } | GatherRows { x, .. } | Dropout { x, .. } | Rotary { x, .. } => vec![*x],
            ConcatLast(xs) | ConcatRows(xs) => xs.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            StackUpdate { stack, actions, value } => vec![*stack, *actions, *value],
            TapeWrite { cells, head, actions, value } => vec![*cells, *head, *actions, *value],
            TapeMove { head, actions, .. } => vec![*head, *actions],
            TapeRead { cells, head } => vec![*cells, *head],
        }
    }
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// A recording of one forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), grad_enabled: true }
    }

    /// A graph for evaluation only; values may be released once consumed.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        self.nodes[var.0].value.as_ref().expect("value of a released node")
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    /// Drops the stored value of a node. Only allowed on inference graphs.
    pub fn release(&mut self, var: Var) {
        if !self.grad_enabled {
            if let Some(node) = self.nodes.get_mut(var.0) {
                if !matches!(node.op, Op::Param) {
                    node.value = None;
                }
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = self.grad_enabled
            && match &op {
                Op::Leaf => false,
                Op::Param => true,
                other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
            };
        let op = if self.grad_enabled { op } else { Op::Leaf };
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let var = self.push(value, Op::Leaf);
        self.nodes[var.0].requires_grad = self.grad_enabled;
        var
    }

    /// The node of a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&var) = self.params.get(&id) {
            return var;
        }
        let value = store.value(id).clone();
        let var = Var(self.nodes.len());
        self.nodes.push(Node { value: Some(value), op: Op::Param, requires_grad: self.grad_enabled });
        self.params.insert(id, var);
        var
    }

    // ----- elementwise -----

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.last_dim();
        if vb.len() != d {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", vx.shape(), vb.shape())));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    // ----- products -----

    /// `[M×K] · [K×N] -> [M×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Batched product `[G×M×K] · [G×K×N]`, or `[G×M×K] · [G×N×K]ᵀ` when
    /// `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?} (transpose_b={transpose_b})")));
        }
        let mut out = Tensor::zeros(&[g, m, n]);
        let b_strides = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..g {
            T::gemm(
                m,
                k,
                n,
                &va.data()[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &vb.data()[i * k * n..(i + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        Ok(self.push(out, Op::BatchMatMul { a, b, transpose_b }))
    }

    // ----- shape manipulation -----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", vx.shape())));
        }
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = vx.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let rank = vx.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{:?} by {perm:?}", vx.shape())));
        }
        let out = permute_tensor(vx, perm);
        Ok(self.push(out, Op::Permute(x, perm.to_vec())))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat_last", "no inputs"))?;
        let outer = self.value(*first).outer_len();
        let lead: Vec<usize> = self.shape(*first)[..self.value(*first).rank().saturating_sub(1)].to_vec();
        let mut total = 0;
        for &x in xs {
            let v = self.value(x);
            if v.outer_len() != outer || v.rank() != lead.len() + 1 {
                return Err(Error::shape("concat_last", format!("{:?}", v.shape())));
            }
            total += v.last_dim();
        }
        let mut data = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatLast(xs.to_vec())))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if start + len > d {
            return Err(Error::shape("slice_last", format!("{start}+{len} > {d}")));
        }
        let mut data = Vec::with_capacity(vx.outer_len() * len);
        for row in vx.data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SliceLast { x, start }))
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let tail: Vec<usize> = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_rows", format!("{:?} vs tail {tail:?}", v.shape())));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatRows(xs.to_vec())))
    }

    /// Selects (and possibly repeats) slices along the leading axis.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 {
            return Err(Error::shape("gather_rows", "scalar input"));
        }
        let n = vx.shape()[0];
        let width = vx.len() / n.max(1);
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            if i >= n {
                return Err(Error::shape("gather_rows", format!("row {i} of {n}")));
            }
            data.extend_from_slice(&vx.data()[i * width..(i + 1) * width]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::GatherRows { x, index: index.to_vec() }))
    }

    /// Embedding lookup: one-hot rows times `table`, i.e. row selection.
    pub fn embedding(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        self.gather_rows(table, tokens)
    }

    // ----- normalisation and losses -----

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x))
    }

    /// Weighted mean cross-entropy of `logits[R×K]` against class indices:
    /// `-(1/Σw) Σ_r w_r log softmax(logits_r)[target_r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape()[0] != targets.len() || weights.len() != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?}, {} targets, {} weights", vl.shape(), targets.len(), weights.len()),
            ));
        }
        let k = vl.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidInput(format!("target class {bad} out of {k}")));
        }
        let total: T = weights.iter().copied().sum();
        if total <= T::zero() {
            return Err(Error::InvalidInput("cross_entropy mask selects no position".into()));
        }
        let mut loss = T::zero();
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == T::zero() {
                continue;
            }
            let row = vl.row(r);
            loss -= w * (row[t] - log_sum_exp(row));
        }
        let out = Tensor::scalar(loss / total);
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec() }))
    }

    /// Per-slice normalisation over the last axis followed by `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.last_dim();
        if d < 2 || vg.len() != d || vb.len() != d {
            return Err(Error::shape("layer_norm", format!("{:?} gain {:?} bias {:?}", vx.shape(), vg.shape(), vb.shape())));
        }
        let eps = T::from_float(LAYER_NORM_EPS);
        let n = T::from_usize(d).expect("dimension fits");
        let mut out = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.outer_len());
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * vg.data()[i] + vb.data()[i];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, inv_std }))
    }

    /// Inverted dropout with keep-mask drawn from `rng`; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_float(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with an explicit multiplicative mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Var {
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("mask matches input");
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len().max(1)).expect("length fits");
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    // ----- positional primitives -----

    /// Rotates consecutive coordinate pairs of `x[G×T×D]` at row `t` by
    /// `t·θ_i`, `θ_i = base^(-2i/D)`.
    pub fn rotary(&mut self, x: Var, base: f64) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || s[2] % 2 != 0 {
            return Err(Error::shape("rotary", format!("{s:?} needs [G, T, even D]")));
        }
        let (g, t, d) = (s[0], s[1], s[2]);
        let half = d / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for p in 0..t {
            for i in 0..half {
                let theta = base.powf(-2.0 * i as f64 / d as f64);
                let angle = p as f64 * theta;
                cos.push(T::from_float(angle.cos()));
                sin.push(T::from_float(angle.sin()));
            }
        }
        let mut out = vx.clone();
        rotate_pairs(out.data_mut(), &cos, &sin, g, t, half, false);
        Ok(self.push(out, Op::Rotary { x, cos, sin }))
    }

    /// `[G×T×(2T-1)] -> [G×T×T]` with `out[g,i,j] = x[g,i,i-j+T-1]`: turns
    /// scores indexed by relative distance into scores indexed by key.
    pub fn rel_shift(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || s[2] + 1 != 2 * s[1] {
            return Err(Error::shape("rel_shift", format!("{s:?} needs [G, T, 2T-1]")));
        }
        let (g, t, w) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(&[g, t, t]);
        for b in 0..g {
            for i in 0..t {
                for j in 0..t {
                    out.data_mut()[(b * t + i) * t + j] = vx.data()[(b * t + i) * w + i + t - 1 - j];
                }
            }
        }
        Ok(self.push(out, Op::RelShift(x)))
    }

    // ----- differentiable memory -----

    /// Superposed push/pop/no-op on a batch of stacks `[B×R×C]` with
    /// actions `[B×3]` and push values `[B×C]`. The result keeps
    /// `min(R + 1, depth)` rows; rows beyond those are identically zero.
    pub fn stack_update(&mut self, stack: Var, actions: Var, value: Var, depth: usize) -> Result<Var> {
        let (vs, va, vv) = (self.value(stack), self.value(actions), self.value(value));
        let s = vs.shape();
        if s.len() != 3
            || va.shape() != [s[0], kernels::STACK_ACTIONS]
            || vv.shape() != [s[0], s[2]]
            || s[1] > depth
        {
            return Err(Error::shape(
                "stack_update",
                format!("stack {s:?}, actions {:?}, value {:?}, depth {depth}", va.shape(), vv.shape()),
            ));
        }
        let (b, rows, cell) = (s[0], s[1], s[2]);
        let out_rows = kernels::stack_rows_after(rows, depth);
        let mut out = Tensor::zeros(&[b, out_rows, cell]);
        for i in 0..b {
            kernels::stack_update(
                &vs.data()[i * rows * cell..(i + 1) * rows * cell],
                va.row(i),
                vv.row(i),
                cell,
                &mut out.data_mut()[i * out_rows * cell..(i + 1) * out_rows * cell],
            );
        }
        Ok(self.push(out, Op::StackUpdate { stack, actions, value }))
    }

    /// Soft write of `value[B×C]` into `cells[B×N×C]` under `head[B×N]`.
    pub fn tape_write(&mut self, cells: Var, head: Var, actions: Var, value: Var) -> Result<Var> {
        let (vc, vh, va, vv) = (self.value(cells), self.value(head), self.value(actions), self.value(value));
        let s = vc.shape();
        if s.len() != 3
            || vh.shape() != [s[0], s[1]]
            || va.shape() != [s[0], kernels::TAPE_ACTIONS]
            || vv.shape() != [s[0], s[2]]
        {
            return Err(Error::shape(
                "tape_write",
                format!("cells {s:?}, head {:?}, actions {:?}, value {:?}", vh.shape(), va.shape(), vv.shape()),
            ));
        }
        let (b, n, cell) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(s);
        for i in 0..b {
            kernels::tape_write(
                &vc.data()[i * n * cell..(i + 1) * n * cell],
                vh.row(i),
                va.row(i),
                vv.row(i),
                cell,
                &mut out.data_mut()[i * n * cell..(i + 1) * n * cell],
            );
        }
        Ok(self.push(out, Op::TapeWrite { cells, head, actions, value }))
    }

    /// Moves every head `[B×N]` by its action mixture; `jumps[b]` is the jump
    /// distance of sequence `b`.
    pub fn tape_move(&mut self, head: Var, actions: Var, jumps: &[usize]) -> Result<Var> {
        let (vh, va) = (self.value(head), self.value(actions));
        let s = vh.shape();
        if s.len() != 2 || va.shape() != [s[0], kernels::TAPE_ACTIONS] || jumps.len() != s[0] {
            return Err(Error::shape(
                "tape_move",
                format!("head {s:?}, actions {:?}, {} jumps", va.shape(), jumps.len()),
            ));
        }
        let mut out = Tensor::zeros(s);
        let n = s[1];
        for (i, &jump) in jumps.iter().enumerate() {
            kernels::tape_move(vh.row(i), va.row(i), jump, &mut out.data_mut()[i * n..(i + 1) * n]);
        }
        Ok(self.push(out, Op::TapeMove { head, actions, jumps: jumps.to_vec() }))
    }

    /// Expected cell under each head: `[B×N×C], [B×N] -> [B×C]`.
    pub fn tape_read(&mut self, cells: Var, head: Var) -> Result<Var> {
        let (vc, vh) = (self.value(cells), self.value(head));
        let s = vc.shape();
        if s.len() != 3 || vh.shape() != [s[0], s[1]] {
            return Err(Error::shape("tape_read", format!("cells {s:?}, head {:?}", vh.shape())));
        }
        let (b, n, cell) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(&[b, cell]);
        for i in 0..b {
            kernels::tape_read(
                &vc.data()[i * n * cell..(i + 1) * n * cell],
                vh.row(i),
                cell,
                &mut out.data_mut()[i * cell..(i + 1) * cell],
            );
        }
        Ok(self.push(out, Op::TapeRead { cells, head }))
    }

    // ----- reverse pass -----

    /// Reverse sweep from a scalar `loss`; every node that depends on a
    /// parameter or gradient-tracking input receives `∂loss/∂node`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::InvalidInput("backward on an inference graph".into()));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidInput(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every parameter node into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (&id, &var) in &self.params {
            if let Some(g) = grads.wrt(var) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.as_ref().expect("recorded value");
        macro_rules! slot {
            ($var:expr) => {{
                let v: Var = $var;
                let len = self.value(v).len();
                grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice()
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(slot!(v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(slot!(*a), g);
                }
                if self.wants(*b) {
                    for (d, &gi) in slot!(*b).iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let vb = self.value(*b).data();
                    for ((d, &gi), &y) in slot!(*a).iter_mut().zip(g).zip(vb) {
                        *d += gi * y;
                    }
                }
                if self.wants(*b) {
                    let va = self.value(*a).data();
                    for ((d, &gi), &x) in slot!(*b).iter_mut().zip(g).zip(va) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    for (d, &gi) in slot!(*x).iter_mut().zip(g) {
                        *d += gi * *s;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    add_into(slot!(*x), g);
                }
                if self.wants(*bias) {
                    let dst = slot!(*bias);
                    let d = dst.len();
                    for row in g.chunks(d) {
                        add_into(dst, row);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    for ((d, &gi), &y) in slot!(*x).iter_mut().zip(g).zip(out.data()) {
                        *d += gi * (T::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    for ((d, &gi), &y) in slot!(*x).iter_mut().zip(g).zip(out.data()) {
                        *d += gi * y * (T::one() - y);
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    for ((d, &gi), &y) in slot!(*x).iter_mut().zip(g).zip(out.data()) {
                        if y > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    T::gemm(m, n, k, g, (n as isize, 1), vb.data(), (1, n as isize), T::one(), slot!(*a), (k as isize, 1));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    T::gemm(k, m, n, va.data(), (1, k as isize), g, (n as isize, 1), T::one(), slot!(*b), (n as isize, 1));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (groups, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = out.shape()[2];
                if self.wants(*a) {
                    let vb = vb.data();
                    let da = slot!(*a);
                    for i in 0..groups {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        // C = A·B: dA = dC·Bᵀ; C = A·Bᵀ: dA = dC·B.
                        let b_strides = if *transpose_b { (k as isize, 1) } else { (1, n as isize) };
                        T::gemm(m, n, k, gi, (n as isize, 1), bi, b_strides, T::one(), &mut da[i * m * k..(i + 1) * m * k], (k as isize, 1));
                    }
                }
                if self.wants(*b) {
                    let va = va.data();
                    let db = slot!(*b);
                    for i in 0..groups {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // dB[n×k] = dCᵀ · A
                            T::gemm(n, m, k, gi, (1, n as isize), ai, (k as isize, 1), T::one(), dbi, (k as isize, 1));
                        } else {
                            // dB[k×n] = Aᵀ · dC
                            T::gemm(k, m, n, ai, (1, k as isize), gi, (n as isize, 1), T::one(), dbi, (n as isize, 1));
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(slot!(*x), g);
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (r, c) = (out.shape()[1], out.shape()[0]);
                    let dst = slot!(*x);
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Permute(x, perm) => {
                if self.wants(*x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let gt = Tensor::new(out.shape().to_vec(), g.to_vec())?;
                    let back = permute_tensor(&gt, &inverse);
                    add_into(slot!(*x), back.data());
                }
            }
            Op::ConcatLast(xs) => {
                let total = out.last_dim();
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).last_dim();
                    if self.wants(x) {
                        let dst = slot!(x);
                        for (r, row) in g.chunks(total).enumerate() {
                            add_into(&mut dst[r * w..(r + 1) * w], &row[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                if self.wants(*x) {
                    let d = self.value(*x).last_dim();
                    let w = out.last_dim();
                    let dst = slot!(*x);
                    for (r, row) in g.chunks(w).enumerate() {
                        add_into(&mut dst[r * d + start..r * d + start + w], row);
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    if self.wants(x) {
                        add_into(slot!(x), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                if self.wants(*x) {
                    let vx = self.value(*x);
                    let width = vx.len() / vx.shape()[0].max(1);
                    let dst = slot!(*x);
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut dst[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let d = out.last_dim();
                    let dst = slot!(*x);
                    for ((dr, gr), yr) in dst.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gi), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gi - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights } => {
                if self.wants(*logits) {
                    let vl = self.value(*logits);
                    let k = vl.shape()[1];
                    let total: T = weights.iter().copied().sum();
                                        let dst = slot!(*logits);
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let mut p = vl.row(r).to_vec();
                        softmax_in_place(&mut p);
                        let coef = g[0] * w / total;
                        for (c, pc) in p.iter().enumerate() {
                            let y = if c == t { T::one() } else { T::zero() };
                            dst[r * k + c] += coef * (*pc - y);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, inv_std } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let d = vx.last_dim();
                let n = T::from_usize(d).expect("dimension fits");
                let xs = vx.data();
                let gains = vg.data();
                let mut normalized = vec![T::zero(); xs.len()];
                for (r, (row, nr)) in xs.chunks(d).zip(normalized.chunks_mut(d)).enumerate() {
                    let mean = row.iter().copied().sum::<T>() / n;
                    for (o, &v) in nr.iter_mut().zip(row) {
                        *o = (v - mean) * inv_std[r];
                    }
                }
                if self.wants(*gain) {
                    let dst = slot!(*gain);
                    for (gr, nr) in g.chunks(d).zip(normalized.chunks(d)) {
                        for ((o, &gi), &ni) in dst.iter_mut().zip(gr).zip(nr) {
                            *o += gi * ni;
                        }
                    }
                }
                if self.wants(*bias) {
                    let dst = slot!(*bias);
                    for gr in g.chunks(d) {
                        add_into(dst, gr);
                    }
                }
                if self.wants(*x) {
                    let dst = slot!(*x);
                    for (r, ((dr, gr), nr)) in dst.chunks_mut(d).zip(g.chunks(d)).zip(normalized.chunks(d)).enumerate() {
                        let dn: Vec<T> = gr.iter().zip(gains).map(|(&a, &b)| a * b).collect();
                        let mean_dn = dn.iter().copied().sum::<T>() / n;
                        let mean_dn_n = dn.iter().zip(nr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((o, &dni), &ni) in dr.iter_mut().zip(&dn).zip(nr) {
                            *o += inv_std[r] * (dni - mean_dn - ni * mean_dn_n);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    for ((d, &gi), &m) in slot!(*x).iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    for d in slot!(*x).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Rotary { x, cos, sin } => {
                if self.wants(*x) {
                    let s = out.shape();
                    let mut back = g.to_vec();
                    rotate_pairs(&mut back, cos, sin, s[0], s[1], s[2] / 2, true);
                    add_into(slot!(*x), &back);
                }
            }
            Op::RelShift(x) => {
                if self.wants(*x) {
                    let s = out.shape();
                    let (groups, t) = (s[0], s[1]);
                    let w = 2 * t - 1;
                    let dst = slot!(*x);
                    for b in 0..groups {
                        for i in 0..t {
                            for j in 0..t {
                                dst[(b * t + i) * w + i + t - 1 - j] += g[(b * t + i) * t + j];
                            }
                        }
                    }
                }
            }
            Op::StackUpdate { stack, actions, value } => {
                let (vs, va, vv) = (self.value(*stack), self.value(*actions), self.value(*value));
                let (b, rows, cell) = (vs.shape()[0], vs.shape()[1], vs.shape()[2]);
                let out_rows = out.shape()[1];
                let (sd, ad, vd) = (vs.data(), va.data(), vv.data());
                let mut d_stack = self.wants(*stack).then(|| vec![T::zero(); sd.len()]);
                let mut d_act = self.wants(*actions).then(|| vec![T::zero(); ad.len()]);
                let mut d_val = self.wants(*value).then(|| vec![T::zero(); vd.len()]);
                let sa = kernels::STACK_ACTIONS;
                for i in 0..b {
                    kernels::stack_update_backward(
                        &sd[i * rows * cell..(i + 1) * rows * cell],
                        &ad[i * sa..(i + 1) * sa],
                        &vd[i * cell..(i + 1) * cell],
                        cell,
                        &g[i * out_rows * cell..(i + 1) * out_rows * cell],
                        d_stack.as_deref_mut().map(|d| &mut d[i * rows * cell..(i + 1) * rows * cell]),
                        d_act.as_deref_mut().map(|d| &mut d[i * sa..(i + 1) * sa]),
                        d_val.as_deref_mut().map(|d| &mut d[i * cell..(i + 1) * cell]),
                    );
                }
                for (var, d) in [(*stack, d_stack), (*actions, d_act), (*value, d_val)] {
                    if let Some(d) = d {
                        add_into(slot!(var), &d);
                    }
                }
            }
            Op::TapeWrite { cells, head, actions, value } => {
                let vc = self.value(*cells).data();
                let vh = self.value(*head).data();
                let va = self.value(*actions).data();
                let vv = self.value(*value).data();
                let s = out.shape();
                let (b, n, cell) = (s[0], s[1], s[2]);
                let ta = kernels::TAPE_ACTIONS;
                let mut d_cells = self.wants(*cells).then(|| vec![T::zero(); vc.len()]);
                let mut d_head = self.wants(*head).then(|| vec![T::zero(); vh.len()]);
                let mut d_act = self.wants(*actions).then(|| vec![T::zero(); va.len()]);
                let mut d_val = self.wants(*value).then(|| vec![T::zero(); vv.len()]);
                for i in 0..b {
                    kernels::tape_write_backward(
                        &vc[i * n * cell..(i + 1) * n * cell],
                        &vh[i * n..(i + 1) * n],
                        &va[i * ta..(i + 1) * ta],
                        &vv[i * cell..(i + 1) * cell],
                        cell,
                        &g[i * n * cell..(i + 1) * n * cell],
                        d_cells.as_deref_mut().map(|d| &mut d[i * n * cell..(i + 1) * n * cell]),
                        d_head.as_deref_mut().map(|d| &mut d[i * n..(i + 1) * n]),
                        d_act.as_deref_mut().map(|d| &mut d[i * ta..(i + 1) * ta]),
                        d_val.as_deref_mut().map(|d| &mut d[i * cell..(i + 1) * cell]),
                    );
                }
                for (var, d) in [(*cells, d_cells), (*head, d_head), (*actions, d_act), (*value, d_val)] {
                    if let Some(d) = d {
                        add_into(slot!(var), &d);
                    }
                }
            }
            Op::TapeMove { head, actions, jumps } => {
                let vh = self.value(*head).data();
                let va = self.value(*actions).data();
                let n = out.shape()[1];
                let ta = kernels::TAPE_ACTIONS;
                let mut d_head = self.wants(*head).then(|| vec![T::zero(); vh.len()]);
                let mut d_act = self.wants(*actions).then(|| vec![T::zero(); va.len()]);
                for (i, &jump) in jumps.iter().enumerate() {
                    kernels::tape_move_backward(
                        &vh[i * n..(i + 1) * n],
                        &va[i * ta..(i + 1) * ta],
                        jump,
                        &g[i * n..(i + 1) * n],
                        d_head.as_deref_mut().map(|d| &mut d[i * n..(i + 1) * n]),
                        d_act.as_deref_mut().map(|d| &mut d[i * ta..(i + 1) * ta]),
                    );
                }
                for (var, d) in [(*head, d_head), (*actions, d_act)] {
                    if let Some(d) = d {
                        add_into(slot!(var), &d);
                    }
                }
            }
            Op::TapeRead { cells, head } => {
                let vc = self.value(*cells).data();
                let vh = self.value(*head).data();
                let s = self.value(*cells).shape();
                let (b, n, cell) = (s[0], s[1], s[2]);
                let mut d_cells = self.wants(*cells).then(|| vec![T::zero(); vc.len()]);
                let mut d_head = self.wants(*head).then(|| vec![T::zero(); vh.len()]);
                for i in 0..b {
                    kernels::tape_read_backward(
                        &vc[i * n * cell..(i + 1) * n * cell],
                        &vh[i * n..(i + 1) * n],
                        cell,
                        &g[i * cell..(i + 1) * cell],
                        d_cells.as_deref_mut().map(|d| &mut d[i * n * cell..(i + 1) * n * cell]),
                        d_head.as_deref_mut().map(|d| &mut d[i * n..(i + 1) * n]),
                    );
                }
                for (var, d) in [(*cells, d_cells), (*head, d_head)] {
                    if let Some(d) = d {
                        add_into(slot!(var), &d);
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn rotate_pairs<T: Scalar>(data: &mut [T], cos: &[T], sin: &[T], groups: usize, t: usize, half: usize, inverse: bool) {
    let d = 2 * half;
    for b in 0..groups {
        for p in 0..t {
            let row = &mut data[(b * t + p) * d..(b * t + p + 1) * d];
            for i in 0..half {
                let (c, s) = (cos[p * half + i], sin[p * half + i]);
                let s = if inverse { -s } else { s };
                let (x0, x1) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = x0 * c - x1 * s;
                row[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = Vec::with_capacity(x.len());
    let mut counter = vec![0usize; rank];
    for _ in 0..x.len() {
        let offset: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        data.push(x.data()[offset]);
        for axis in (0..rank).rev() {
            counter[axis] += 1;
            if counter[axis] < out_shape[axis] {
                break;
            }
            counter[axis] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permutation preserves size")
}
