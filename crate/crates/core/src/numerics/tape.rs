//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs to replay its adjoint. [`Tape::backward`] walks the record once,
//! newest node first; a second walk requires [`Tape::reset`].

use std::collections::HashMap;

use rand::Rng;

use super::gemm::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::tensor::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product supplied by the caller of [`Tape::custom`].
///
/// Receives the input values, the output value and the upstream adjoint, and
/// returns one adjoint per input.
pub type CustomVjp<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, T),
    Gelu(Var),
    Dropout { x: Var, mask: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax { x: Var, axis: usize },
    MaxOverSequence { x: Var, source: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    SegmentMean { x: Var, segments: Vec<Vec<usize>> },
    NormalizeRows { x: Var, norms: Vec<T> },
    Attention(Box<AttentionSaved<T>>),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T> },
    Sum(Var),
    Reshape(Var),
    Custom { inputs: Vec<Var>, vjp: CustomVjp<T> },
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    seq: usize,
    /// Softmax output before attention dropout, `[batch, heads, seq, seq]`.
    probs: Vec<T>,
    /// Dropout multipliers (0 or 1/(1-rate)) matching `probs`.
    keep: Option<Vec<T>>,
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Options for [`Tape::attention`].
pub struct AttentionSpec<'a> {
    pub heads: usize,
    /// Positions per sequence; rows of q/k/v are `batch * seq`.
    pub seq: usize,
    /// Which key positions may be attended to.
    pub key_valid: &'a [bool],
}

/// Operation record for one forward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    consumed: bool,
    last_order: Vec<Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of a parameter bound with [`Tape::param`].
    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// Writes every parameter's adjoint into its gradient slot. Parameters
    /// that never reached the tape receive an explicit zero gradient.
    pub fn write_to(&self, params: &mut ParamSet<T>) -> Result<()> {
        for (name, tensor) in params.iter_mut() {
            let g = match self.param(name) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); tensor.len()],
            };
            tensor.set_grad(g)?;
        }
        Ok(())
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let d_inner = c * (T::one() + three * a * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner;
    (value, deriv)
}

/// Elementwise GELU (tanh approximation).
pub fn gelu<T: Real>(x: T) -> T {
    gelu_parts(x).0
}

fn softmax_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new(), consumed: false, last_order: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forgets every recorded operation.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.consumed = false;
        self.last_order.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that receives no adjoint.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter, reusing the existing leaf on repeat calls.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.require(name)?.clone();
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// The leaf bound to `name`, if the forward pass touched it.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b: false }, &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b: true }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(Error::dim(
                "add_row",
                format!("bias has {} elements, rows have {cols}", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().chunks(cols).flat_map(|r| r.iter().zip(b).map(|(&u, &v)| u + v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&u| u * s).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&u| gelu(u)).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Inverted dropout. A zero rate returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep_scale })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&u, &m)| u * m).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::dim("layer_norm", format!("gain/bias must have {cols} elements")));
        }
        let eps = T::from_f64_lossy(eps);
        let n = T::from_usize(cols).unwrap();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / cols;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&u| (u - mean) * (u - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Gathers rows of `table` (shape `[vocab, width]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, width) = self.mat_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::dim("embedding", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::dim("embedding", format!("id {bad} out of range for {vocab} rows")));
        }
        let t = self.value(table).data();
        let data = ids.iter().flat_map(|&i| t[i * width..(i + 1) * width].iter().copied()).collect();
        let value = Tensor::new(vec![ids.len(), width], data)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} invalid for shape {shape:?}")));
        }
        let (outer, len, inner) = softmax_layout(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| xv[idx(i)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..len {
                    let e = (xv[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[idx(i)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Feature-wise maximum over the valid positions of each sequence.
    ///
    /// `x` is `[batch * seq, width]`; the result is `[batch, width]`. The
    /// adjoint of each output goes to the first position attaining the max.
    pub fn max_over_sequence(&mut self, x: Var, seq: usize, valid: &[bool]) -> Result<Var> {
        let (rows, width) = self.mat_dims(x, "max_over_sequence")?;
        if seq == 0 || rows % seq != 0 || valid.len() != rows {
            return Err(Error::dim(
                "max_over_sequence",
                format!("{rows} rows, sequence length {seq}, mask of {}", valid.len()),
            ));
        }
        let batch = rows / seq;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); batch * width];
        let mut source = vec![0usize; batch * width];
        for b in 0..batch {
            let positions: Vec<usize> = (0..seq).filter(|&p| valid[b * seq + p]).collect();
            let Some(&first) = positions.first() else {
                return Err(Error::EmptyPool { sequence: b });
            };
            for d in 0..width {
                let mut best_row = b * seq + first;
                let mut best = xv[best_row * width + d];
                for &p in &positions[1..] {
                    let r = b * seq + p;
                    let v = xv[r * width + d];
                    if v > best {
                        best = v;
                        best_row = r;
                    }
                }
                out[b * width + d] = best;
                source[b * width + d] = best_row * width + d;
            }
        }
        let value = Tensor::new(vec![batch, width], out)?;
        Ok(self.push(value, Op::MaxOverSequence { x, source }, &[x]))
    }

    /// Gathers rows of a matrix; rows may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, width) = self.mat_dims(x, "select_rows")?;
        if rows.is_empty() {
            return Err(Error::dim("select_rows", "no rows selected"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim("select_rows", format!("row {bad} out of range for {n}")));
        }
        let xv = self.value(x).data();
        let data = rows.iter().flat_map(|&r| xv[r * width..(r + 1) * width].iter().copied()).collect();
        let value = Tensor::new(vec![rows.len(), width], data)?;
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Stacks matrices of equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_rows", "nothing to concatenate"));
        };
        let width = self.mat_dims(first, "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, w) = self.mat_dims(p, "concat_rows")?;
            if w != width {
                return Err(Error::dim("concat_rows", format!("widths {width} and {w} differ")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Mean of each group of rows; returns `[groups, width]`.
    pub fn segment_mean(&mut self, x: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let (n, width) = self.mat_dims(x, "segment_mean")?;
        if segments.is_empty() || segments.iter().any(Vec::is_empty) {
            return Err(Error::dim("segment_mean", "empty segment"));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); segments.len() * width];
        for (g, seg) in segments.iter().enumerate() {
            let inv = T::one() / T::from_usize(seg.len()).unwrap();
            let dst = &mut out[g * width..(g + 1) * width];
            for &r in seg {
                if r >= n {
                    return Err(Error::dim("segment_mean", format!("row {r} out of range for {n}")));
                }
                for (o, &v) in dst.iter_mut().zip(&xv[r * width..(r + 1) * width]) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(vec![segments.len(), width], out)?;
        Ok(self.push(value, Op::SegmentMean { x, segments: segments.to_vec() }, &[x]))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, width) = self.mat_dims(x, "normalize_rows")?;
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(xv.len());
        for (i, row) in xv.chunks(width).enumerate() {
            let norm = row.iter().map(|&u| u * u).sum::<T>().sqrt();
            if norm == T::zero() || !norm.is_finite() {
                return Err(Error::ZeroNorm { index: i });
            }
            norms.push(norm);
            out.extend(row.iter().map(|&u| u / norm));
        }
        let value = Tensor::new(vec![n, width], out)?;
        Ok(self.push(value, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[batch * seq, width]` with `width` split evenly
    /// across heads. Keys flagged invalid get exactly zero weight. Attention
    /// dropout is applied to the weights when `dropout` carries a nonzero rate.
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec<'_>,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        let (rows, width) = self.mat_dims(q, "attention")?;
        if self.value(k).shape() != [rows, width] || self.value(v).shape() != [rows, width] {
            return Err(Error::dim("attention", "q, k and v shapes differ"));
        }
        let (heads, seq) = (spec.heads, spec.seq);
        if heads == 0 || width % heads != 0 || seq == 0 || rows % seq != 0 || spec.key_valid.len() != rows {
            return Err(Error::dim(
                "attention",
                format!("width {width}, heads {heads}, rows {rows}, seq {seq}"),
            ));
        }
        let batch = rows / seq;
        let hd = width / heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            if !(0..seq).any(|j| spec.key_valid[b * seq + j]) {
                return Err(Error::EmptyPool { sequence: b });
            }
            for h in 0..heads {
                let off = h * hd;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * width + off..][..hd];
                    let mut max = T::neg_infinity();
                    for j in 0..seq {
                        if spec.key_valid[b * seq + j] {
                            let kj = &kv[(b * seq + j) * width + off..][..hd];
                            let s = super::gemm::dot(qi, kj) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut total = T::zero();
                    for j in 0..seq {
                        if spec.key_valid[b * seq + j] {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            total += e;
                        }
                    }
                    p.iter_mut().for_each(|x| *x /= total);
                }
            }
        }
        let keep = match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                if rate >= 1.0 {
                    return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
                }
                let s = T::from_f64_lossy(1.0 / (1.0 - rate));
                Some(
                    (0..probs.len())
                        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { s })
                        .collect::<Vec<T>>(),
                )
            }
            _ => None,
        };
        let mut out = vec![T::zero(); rows * width];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..seq {
                    let base = ((b * heads + h) * seq + i) * seq;
                    let dst = &mut out[(b * seq + i) * width + off..][..hd];
                    for j in 0..seq {
                        let mut w = probs[base + j];
                        if let Some(keep) = &keep {
                            w *= keep[base + j];
                        }
                        if w == T::zero() {
                            continue;
                        }
                        let vj = &vv[(b * seq + j) * width + off..][..hd];
                        for (o, &x) in dst.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, width], out)?;
        let saved = AttentionSaved { q, k, v, heads, seq, probs, keep };
        Ok(self.push(value, Op::Attention(Box::new(saved)), &[q, k, v]))
    }

    /// Attention weights (before dropout) recorded by an attention node,
    /// laid out `[batch, heads, seq, seq]`.
    pub fn attention_weights(&self, var: Var) -> Option<&[T]> {
        match &self.nodes.get(var.0)?.op {
            Op::Attention(saved) => Some(&saved.probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood over rows whose label differs from
    /// `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32], ignore: u32) -> Result<Var> {
        let (n, classes) = self.mat_dims(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim("cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        let mut targets = Vec::with_capacity(n);
        for &l in labels {
            if l == ignore {
                targets.push(None);
            } else if (l as usize) < classes {
                targets.push(Some(l as usize));
            } else {
                return Err(Error::dim("cross_entropy", format!("label {l} out of range for {classes}")));
            }
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::UndefinedLoss);
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * classes];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&u| (u - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[t];
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - log_z).exp();
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs }, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Records a caller-defined operation with its own adjoint rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        vjp: impl Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>> + 'static,
    ) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), vjp: Box::new(vjp) }, inputs)
    }

    /// Operations visited by the most recent backward pass, in visit order.
    pub fn last_backward_order(&self) -> &[Var] {
        &self.last_order
    }

    /// Propagates adjoints from the scalar `loss` to every recorded input.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape; reset it first".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut order = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            order.push(Var(idx));
            self.node_vjp(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.last_order = order;
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn node_vjp(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                if *trans_b {
                    let n = val(*b).rows();
                    if wants(*a) {
                        acc(*a, &mut |ga| matmul_acc(g, val(*b).data(), ga, m, n, k));
                    }
                    if wants(*b) {
                        acc(*b, &mut |gb| matmul_tn_acc(g, val(*a).data(), gb, n, m, k));
                    }
                } else {
                    let n = val(*b).cols();
                    if wants(*a) {
                        acc(*a, &mut |ga| matmul_nt_acc(g, val(*b).data(), ga, m, n, k));
                    }
                    if wants(*b) {
                        acc(*b, &mut |gb| matmul_tn_acc(val(*a).data(), g, gb, k, m, n));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow { x, bias } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(u, &w)| *u += w));
                let cols = val(*x).cols();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(u, &w)| *u += w);
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(u, &w)| *u += w * *s));
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * gelu_parts(xv[i]).1;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * mask[i];
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let cols = val(*x).cols();
                let gv = val(*gain).data();
                let n = T::from_usize(cols).unwrap();
                acc(*gain, &mut |gg| {
                    for (row_g, row_h) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += row_g[c] * row_h[c];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for row_g in g.chunks(cols) {
                        gb.iter_mut().zip(row_g).for_each(|(u, &w)| *u += w);
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, (row_g, row_h)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..cols {
                            let dh = row_g[c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * row_h[c];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        for c in 0..cols {
                            let dh = row_g[c] * gv[c];
                            gx[r * cols + c] += inv_std[r] * (dh - mean_dh - row_h[c] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let width = val(*table).cols();
                acc(*table, &mut |gt| {
                    for (row, &id) in g.chunks(width).zip(ids) {
                        gt[id * width..(id + 1) * width].iter_mut().zip(row).for_each(|(u, &w)| *u += w);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = softmax_layout(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dotp: T = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..len {
                                gx[idx(i)] += y[idx(i)] * (g[idx(i)] - dotp);
                            }
                        }
                    }
                });
            }
            Op::MaxOverSequence { x, source } => {
                acc(*x, &mut |gx| {
                    for (o, &s) in source.iter().enumerate() {
                        gx[s] += g[o];
                    }
                });
            }
            Op::SelectRows { x, rows } => {
                let width = val(*x).cols();
                acc(*x, &mut |gx| {
                    for (row, &r) in g.chunks(width).zip(rows) {
                        gx[r * width..(r + 1) * width].iter_mut().zip(row).for_each(|(u, &w)| *u += w);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    let slice = &g[offset..offset + len];
                    acc(p, &mut |gp| gp.iter_mut().zip(slice).for_each(|(u, &w)| *u += w));
                    offset += len;
                }
            }
            Op::SegmentMean { x, segments } => {
                let width = val(*x).cols();
                acc(*x, &mut |gx| {
                    for (grow, seg) in g.chunks(width).zip(segments) {
                        let inv = T::one() / T::from_usize(seg.len()).unwrap();
                        for &r in seg {
                            gx[r * width..(r + 1) * width]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(u, &w)| *u += w * inv);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                let width = val(*x).cols();
                acc(*x, &mut |gx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * width..(r + 1) * width];
                        let gr = &g[r * width..(r + 1) * width];
                        let proj = super::gemm::dot(yr, gr);
                        for c in 0..width {
                            gx[r * width + c] += (gr[c] - yr[c] * proj) / norm;
                        }
                    }
                });
            }
            Op::Attention(saved) => self.attention_vjp(saved, g, grads),
            Op::CrossEntropy { logits, targets, probs } => {
                let classes = val(*logits).cols();
                let count = T::from_usize(targets.iter().flatten().count()).unwrap();
                let scale = g[0] / count;
                acc(*logits, &mut |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..classes {
                            gl[r * classes + c] += probs[r * classes + c] * scale;
                        }
                        gl[r * classes + t] -= scale;
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|u| *u += g[0]));
            }
            Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(u, &w)| *u += w));
            }
            Op::Custom { inputs, vjp } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let adjoints = vjp(&values, &node.value, g);
                if adjoints.len() != inputs.len() {
                    return Err(Error::Tape(format!(
                        "custom adjoint returned {} gradients for {} inputs",
                        adjoints.len(),
                        inputs.len()
                    )));
                }
                for (&v, adj) in inputs.iter().zip(&adjoints) {
                    if adj.len() != val(v).len() {
                        return Err(Error::Tape("custom adjoint has the wrong length".into()));
                    }
                    acc(v, &mut |gv| gv.iter_mut().zip(adj).for_each(|(u, &w)| *u += w));
                }
            }
        }
        Ok(())
    }

    fn attention_vjp(&self, s: &AttentionSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (qv, kv, vv) = (self.value(s.q).data(), self.value(s.k).data(), self.value(s.v).data());
        let (rows, width) = (self.value(s.q).rows(), self.value(s.q).cols());
        let (heads, seq) = (s.heads, s.seq);
        let batch = rows / seq;
        let hd = width / heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let mut dq = vec![T::zero(); rows * width];
        let mut dk = vec![T::zero(); rows * width];
        let mut dv = vec![T::zero(); rows * width];
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..seq {
                    let base = ((b * heads + h) * seq + i) * seq;
                    let gi = &g[(b * seq + i) * width + off..][..hd];
                    // adjoint of the (possibly dropped) weights, mapped back through dropout
                    for j in 0..seq {
                        let p = s.probs[base + j];
                        let keep = s.keep.as_ref().map_or(T::one(), |k| k[base + j]);
                        if p == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &vv[(b * seq + j) * width + off..][..hd];
                        dp[j] = super::gemm::dot(gi, vj) * keep;
                        let w = p * keep;
                        if w != T::zero() {
                            let dvj = &mut dv[(b * seq + j) * width + off..][..hd];
                            for (u, &x) in dvj.iter_mut().zip(gi) {
                                *u += w * x;
                            }
                        }
                    }
                    let probs = &s.probs[base..base + seq];
                    let inner: T = probs.iter().zip(&dp).map(|(&p, &d)| p * d).sum();
                    let qi = &qv[(b * seq + i) * width + off..][..hd];
                    for j in 0..seq {
                        let p = probs[j];
                        if p == T::zero() {
                            continue;
                        }
                        let ds = p * (dp[j] - inner) * scale;
                        let kj = &kv[(b * seq + j) * width + off..][..hd];
                        let dqi = &mut dq[(b * seq + i) * width + off..][..hd];
                        for (u, &x) in dqi.iter_mut().zip(kj) {
                            *u += ds * x;
                        }
                        let dkj = &mut dk[(b * seq + j) * width + off..][..hd];
                        for (u, &x) in dkj.iter_mut().zip(qi) {
                            *u += ds * x;
                        }
                    }
                }
            }
        }
        for (v, d) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if !self.nodes[v.0].needs_grad {
                continue;
            }
            match &mut grads[v.0] {
                Some(slot) => slot.iter_mut().zip(&d).for_each(|(u, &w)| *u += w),
                slot @ None => *slot = Some(d),
            }
        }
    }
}
