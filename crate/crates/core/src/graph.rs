//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! A [`Graph`] is built by calling operations on it; each call evaluates
//! eagerly and appends a node, so the node list is topologically ordered by
//! construction. [`Graph::backward`] walks the list once in reverse.
//!
//! Batched operands follow one convention throughout: a tensor of shape
//! `[.., m, n]` is a stack of `m x n` matrices, and "rows" are the vectors
//! along the last axis.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Scalar, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, w: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Transpose { a: Var },
    Reshape { a: Var },
    Add { a: Var, b: Var },
    AddBcast { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulScalar { a: Var, s: Var },
    Scale { a: Var, c: T },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Concat { parts: Vec<Var> },
    Slice { a: Var, start: usize },
    RepeatBatch { a: Var },
    MaskRows { a: Var, keep: Vec<bool> },
    WeightedMeanRows { a: Var, weights: Vec<T> },
    Sum { a: Var },
    Mean { a: Var },
    L2Normalize { a: Var, eps: T, norms: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Focal { logits: Var, labels: Vec<usize>, gamma: T, probs: Vec<T>, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store.iter().map(|(_, _, t)| Some(vec![T::zero(); t.len()])).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.index()).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`; missing entries count as zero.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (_, None) => {}
                (None, Some(g)) => *mine = Some(g.clone()),
                (Some(m), Some(g)) => m.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// First parameter holding a non-finite gradient, if any.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.grads
            .iter()
            .position(|g| g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())))
            .map(ParamId::from_index)
    }
}

/// Number of leading matrices and the trailing `(m, n)` of a batched shape.
fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, 1, shape[0]),
        r => (
            shape[..r - 2].iter().product(),
            shape[r - 2],
            shape[r - 1],
        ),
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let n = shape.last().copied().unwrap_or(1);
    let total: usize = shape.iter().product();
    (if n == 0 { 0 } else { total / n }, n)
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn softmax_rows<T: Scalar>(x: &[T], n: usize, out: &mut [T]) {
    for (row, o) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            sum += *oi;
        }
        let inv = sum.recip();
        o.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Recorded computation over tensors of element type `T`.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, mut t: Tensor<T>) -> Var {
        t.grad = None;
        t.requires_grad = true;
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a parameter as a differentiable leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Gradients of every parameter inserted with [`Graph::param`].
    pub fn param_grads(&self, store: &ParamStore<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; store.len()];
        for (&id, &v) in &self.params {
            grads[id.index()] = Some(
                self.grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); store.get(id).len()]),
            );
        }
        Gradients { grads }
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[.., k] x w[k, n] -> [.., n]`; every leading index is a row.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sw[0] {
            return Err(Error::dims("matmul", &sa, &sw));
        }
        let (rows, k) = rows_of(&sa);
        let n = sw[1];
        let mut out = vec![T::zero(); rows * n];
        gemm(rows, k, n, self.value(a).data(), false, self.value(w).data(), false, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, w }, &[a, w]))
    }

    /// Batched product `a[.., m, k] x b[.., k, n]`, or `x b[.., n, k]^T`
    /// when `trans_b`. Leading dimensions must agree.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dims("bmm", &sa, &sb));
        }
        let (batch, m, k) = mat_dims(&sa);
        let (_, r, c) = mat_dims(&sb);
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if kb != k {
            return Err(Error::dims("bmm", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = sa;
        let r = shape.len();
        shape[r - 1] = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::Dimension(format!("transpose needs rank >= 2, got {sa:?}")));
        }
        let (batch, m, n) = mat_dims(&sa);
        let out = transpose_batched(self.value(a).data(), batch, m, n);
        let mut shape = sa;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Transpose { a }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a }, &[a]))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, &[a, b]))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (row-vector bias,
    /// or a matrix repeated over a batch).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dims("add_bcast", sa, sb));
        }
        let bd = self.value(b).data();
        let n = bd.len();
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks_exact(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBcast { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a, b }, &[a, b]))
    }

    /// `a * s` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dims("mul_scalar", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let out = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulScalar { a, s }, &[a, s]))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale { a, c }, &[a])
    }

    /// Exact GELU, `0.5 x (1 + erf(x / sqrt 2))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Gelu { a }, &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, n) = rows_of(self.shape(a));
        let mut out = vec![T::zero(); self.value(a).len()];
        if n > 0 {
            softmax_rows(self.value(a).data(), n, &mut out);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax { a }, &[a])
    }

    /// Layer normalization along the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, n) = rows_of(self.shape(x));
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::dims("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::of(eps);
        let inv_n = T::of(1.0 / n as f64);
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        ))
    }

    // ---- structure ------------------------------------------------------

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dims("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { parts: parts.to_vec() },
            parts,
        ))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, n) = rows_of(self.shape(a));
        if start + len > n {
            return Err(Error::Dimension(format!(
                "slice {start}..{} out of last axis {n}",
                start + len
            )));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * n + start..r * n + start + len]);
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { a, start }, &[a]))
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn repeat_batch(&mut self, a: Var, times: usize) -> Var {
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(d.len() * times);
        for _ in 0..times {
            out.extend_from_slice(d);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(a));
        self.push(Tensor::from_parts(shape, out), Op::RepeatBatch { a }, &[a])
    }

    /// Zeroes row `i` of every matrix in `a[.., m, n]` where `!keep[i]`.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (_, m, n) = mat_dims(self.shape(a));
        if keep.len() != m || self.shape(a).len() < 2 {
            return Err(Error::Dimension(format!(
                "mask of length {} for shape {:?}",
                keep.len(),
                self.shape(a)
            )));
        }
        let mut out = self.value(a).data().to_vec();
        for (i, row) in out.chunks_exact_mut(n.max(1)).enumerate() {
            if !keep[i % m] {
                row.iter_mut().for_each(|x| *x = T::zero());
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MaskRows { a, keep: keep.to_vec() },
            &[a],
        ))
    }

    /// Weighted mean over the second-to-last axis: `a[.., m, n] -> [.., n]`,
    /// `sum_i w_i a_i / sum_i w_i`.
    pub fn weighted_mean_rows(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let (batch, m, n) = mat_dims(&sa);
        if sa.len() < 2 || weights.len() != m {
            return Err(Error::Dimension(format!(
                "{} weights for shape {sa:?}",
                weights.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Data("weighted mean over zero total weight".into()));
        }
        let w: Vec<T> = weights.iter().map(|&x| T::of(x / total)).collect();
        let d = self.value(a).data();
        let mut out = vec![T::zero(); batch * n];
        for b in 0..batch {
            let o = &mut out[b * n..(b + 1) * n];
            for (i, &wi) in w.iter().enumerate() {
                if wi == T::zero() {
                    continue;
                }
                let row = &d[(b * m + i) * n..(b * m + i + 1) * n];
                o.iter_mut().zip(row).for_each(|(x, &y)| *x += wi * y);
            }
        }
        let shape = sa[..sa.len() - 2]
            .iter()
            .copied()
            .chain(std::iter::once(n))
            .collect();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::WeightedMeanRows { a, weights: w },
            &[a],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s / T::of(n as f64)), Op::Mean { a }, &[a])
    }

    /// Divides every row by `||row|| + eps`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let (rows, n) = rows_of(self.shape(a));
        let eps = T::of(eps);
        let d = self.value(a).data();
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(d.len());
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            norms.push(norm);
            let inv = (norm + eps).recip();
            out.extend(row.iter().map(|&x| x * inv));
        }
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::L2Normalize { a, eps, norms },
            &[a],
        )
    }

    // ---- losses -----------------------------------------------------------

    /// Mean cross-entropy of softmax(`logits` rows) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, k) = rows_of(self.shape(logits));
        check_labels(labels, rows, k, false)?;
        let mut probs = vec![T::zero(); rows * k];
        softmax_rows(self.value(logits).data(), k, &mut probs);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -probs[r * k + y].max(T::min_positive_value()).ln())
            .sum::<T>()
            / T::of(rows as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    /// Mean focal loss `-(1 - p_y)^gamma log p_y` over rows whose label is
    /// not [`IGNORE_INDEX`]. Zero when every row is ignored.
    pub fn focal_loss(&mut self, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
        let (rows, k) = rows_of(self.shape(logits));
        check_labels(labels, rows, k, true)?;
        let gamma_t = T::of(gamma);
        let mut probs = vec![T::zero(); rows * k];
        softmax_rows(self.value(logits).data(), k, &mut probs);
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &y) in labels.iter().enumerate() {
            if y == IGNORE_INDEX {
                continue;
            }
            let p = probs[r * k + y].max(T::min_positive_value());
            total += -(T::one() - p).powf(gamma_t) * p.ln();
            count += 1;
        }
        let loss = if count == 0 { T::zero() } else { total / T::of(count as f64) };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal { logits, labels: labels.to_vec(), gamma: gamma_t, probs, count },
            &[logits],
        ))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- backward ---------------------------------------------------------

    /// Populates `grad` of every node that requires one, seeded with
    /// `d loss / d loss = 1`. Earlier gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        for (i, g) in grads.into_iter().enumerate() {
            if self.nodes[i].value.requires_grad {
                self.nodes[i].value.grad = g;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, w } => {
                let (rows, k) = rows_of(self.shape(*a));
                let n = self.shape(*w)[1];
                let (av, wv) = (self.value(*a).data(), self.value(*w).data());
                self.acc(grads, *a, |da| gemm(rows, n, k, g, false, wv, true, da, true));
                self.acc(grads, *w, |dw| gemm(k, rows, n, av, true, g, false, dw, true));
            }
            Op::Bmm { a, b, trans_b } => {
                let (batch, m, k) = mat_dims(self.shape(*a));
                let n = *out.shape().last().unwrap();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (sa, sb, sc) = (m * k, k * n, m * n);
                self.acc(grads, *a, |da| {
                    for t in 0..batch {
                        let (gc, bb) = (&g[t * sc..(t + 1) * sc], &bv[t * sb..(t + 1) * sb]);
                        // dA = dC B^T, or dC B when B was used transposed
                        gemm(m, n, k, gc, false, bb, !*trans_b, &mut da[t * sa..(t + 1) * sa], true);
                    }
                });
                self.acc(grads, *b, |db| {
                    for t in 0..batch {
                        let (gc, aa) = (&g[t * sc..(t + 1) * sc], &av[t * sa..(t + 1) * sa]);
                        let dbt = &mut db[t * sb..(t + 1) * sb];
                        if *trans_b {
                            gemm(n, m, k, gc, true, aa, false, dbt, true);
                        } else {
                            gemm(k, m, n, aa, true, gc, false, dbt, true);
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let (batch, m, n) = mat_dims(self.shape(*a));
                let back = transpose_batched(g, batch, n, m);
                self.acc(grads, *a, |da| add_into(da, &back));
            }
            Op::Reshape { a } => self.acc(grads, *a, |da| add_into(da, g)),
            Op::Add { a, b } => {
                self.acc(grads, *a, |da| add_into(da, g));
                self.acc(grads, *b, |db| add_into(db, g));
            }
            Op::AddBcast { a, b } => {
                self.acc(grads, *a, |da| add_into(da, g));
                let n = self.value(*b).len().max(1);
                self.acc(grads, *b, |db| {
                    for chunk in g.chunks_exact(n) {
                        add_into(db, chunk);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |da| {
                    da.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (&gi, &y))| *d += gi * y)
                });
                self.acc(grads, *b, |db| {
                    db.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (&gi, &x))| *d += gi * x)
                });
            }
            Op::MulScalar { a, s } => {
                let c = self.value(*s).data()[0];
                let av = self.value(*a).data();
                self.acc(grads, *a, |da| da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * c));
                self.acc(grads, *s, |ds| {
                    ds[0] += g.iter().zip(av).map(|(&gi, &x)| gi * x).sum::<T>()
                });
            }
            Op::Scale { a, c } => {
                self.acc(grads, *a, |da| da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *c));
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |da| {
                    da.iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (&gi, &x))| *d += gi * gelu_grad(x))
                });
            }
            Op::Softmax { a } => {
                let (_, n) = rows_of(out.shape());
                let y = out.data();
                self.acc(grads, *a, |da| {
                    for ((dr, gr), yr) in da.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                        dr.iter_mut()
                            .zip(gr.iter().zip(yr))
                            .for_each(|(d, (&gi, &yi))| *d += yi * (gi - dot));
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, n) = rows_of(out.shape());
                let gam = self.value(*gamma).data();
                self.acc(grads, *x, |dx| {
                    let inv_n = T::of(1.0 / n as f64);
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() * inv_n;
                        let m2 = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                        for j in 0..n {
                            dx[r * n + j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                });
                self.acc(grads, *gamma, |dg| {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        dg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(d, (&a, &b))| *d += a * b);
                    }
                });
                self.acc(grads, *beta, |db| {
                    for gr in g.chunks_exact(n) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Concat { parts } => {
                let total = out.last_dim();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.acc(grads, p, |dp| {
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { a, start } => {
                let (rows, n) = rows_of(self.shape(*a));
                let len = out.last_dim();
                self.acc(grads, *a, |da| {
                    for r in 0..rows {
                        add_into(
                            &mut da[r * n + start..r * n + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::RepeatBatch { a } => {
                let n = self.value(*a).len().max(1);
                self.acc(grads, *a, |da| {
                    for chunk in g.chunks_exact(n) {
                        add_into(da, chunk);
                    }
                });
            }
            Op::MaskRows { a, keep } => {
                let (_, m, n) = mat_dims(out.shape());
                self.acc(grads, *a, |da| {
                    for (i, (dr, gr)) in da.chunks_exact_mut(n.max(1)).zip(g.chunks_exact(n.max(1))).enumerate() {
                        if keep[i % m] {
                            add_into(dr, gr);
                        }
                    }
                });
            }
            Op::WeightedMeanRows { a, weights } => {
                let (batch, m, n) = mat_dims(self.shape(*a));
                self.acc(grads, *a, |da| {
                    for b in 0..batch {
                        let gb = &g[b * n..(b + 1) * n];
                        for (i, &w) in weights.iter().enumerate() {
                            da[(b * m + i) * n..(b * m + i + 1) * n]
                                .iter_mut()
                                .zip(gb)
                                .for_each(|(d, &gi)| *d += w * gi);
                        }
                    }
                });
            }
            Op::Sum { a } => {
                self.acc(grads, *a, |da| da.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean { a } => {
                let c = g[0] / T::of(self.value(*a).len().max(1) as f64);
                self.acc(grads, *a, |da| da.iter_mut().for_each(|d| *d += c));
            }
            Op::L2Normalize { a, eps, norms } => {
                let (_, n) = rows_of(out.shape());
                let av = self.value(*a).data();
                self.acc(grads, *a, |da| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let (gr, xr) = (&g[r * n..(r + 1) * n], &av[r * n..(r + 1) * n]);
                        let s = norm + *eps;
                        let dot: T = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        let coef = if norm > T::zero() { dot / (s * s * norm) } else { T::zero() };
                        for j in 0..n {
                            da[r * n + j] += gr[j] / s - xr[j] * coef;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = out_k(self.shape(*logits));
                let c = g[0] / T::of(labels.len() as f64);
                self.acc(grads, *logits, |dl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            dl[r * k + j] += c * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::Focal { logits, labels, gamma, probs, count } => {
                if *count == 0 {
                    return;
                }
                let k = out_k(self.shape(*logits));
                let c = g[0] / T::of(*count as f64);
                self.acc(grads, *logits, |dl| {
                    for (r, &y) in labels.iter().enumerate() {
                        if y == IGNORE_INDEX {
                            continue;
                        }
                        let p = probs[r * k + y].max(T::min_positive_value());
                        let q = T::one() - p;
                        // dL/dp for L = -(1-p)^g log p
                        let pow_term = if *gamma == T::zero() {
                            T::zero()
                        } else {
                            *gamma * q.powf(*gamma - T::one()) * p.ln()
                        };
                        let dldp = pow_term - q.powf(*gamma) / p;
                        for j in 0..k {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            dl[r * k + j] += c * dldp * p * (onehot - probs[r * k + j]);
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.value.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
        f(slot);
    }
}

fn out_k(shape: &[usize]) -> usize {
    rows_of(shape).1
}

fn check_labels(labels: &[usize], rows: usize, k: usize, allow_ignore: bool) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Dimension(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels
        .iter()
        .find(|&&y| y >= k && !(allow_ignore && y == IGNORE_INDEX))
    {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn transpose_batched<T: Scalar>(src: &[T], batch: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let (s, o) = (&src[b * m * n..(b + 1) * m * n], &mut out[b * m * n..(b + 1) * m * n]);
        for i in 0..m {
            for j in 0..n {
                o[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}
