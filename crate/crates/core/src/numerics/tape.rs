//! Eager reverse-mode automatic differentiation.
//!
//! Every primitive evaluates immediately and appends a node to the [`Tape`].
//! Nodes only reference earlier nodes, so the node vector is already in
//! topological order and [`Tape::backward`] is a single reverse sweep that
//! visits each node once.
//!
//! ```
//! use drt_core::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_f64([1, 2], &[1.0, 2.0]).unwrap());
//! let y = tape.sum(x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).data(), &[1.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::numerics::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Option<Var>,
        inv_std: Vec<T>,
    },
    MeanRows {
        x: Var,
        groups: usize,
    },
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        heads: usize,
        seq_len: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<T>,
    },
    NormalizeRows {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
    Suppress {
        o: Var,
        dirs: Var,
        r: Var,
        heads: usize,
        k: usize,
        seq_len: usize,
    },
    Override {
        x: Var,
        mask: Vec<bool>,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive applications for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (value, deriv)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Sum of values in an order that does not depend on their arrangement.
pub(crate) fn order_free_sum<T: Scalar>(buf: &mut [T]) -> T {
    buf.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    buf.iter().fold(T::zero(), |acc, &x| acc + x)
}

fn rope_tables<T: Scalar>(seq_len: usize, d_head: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = d_head / 2;
    let mut cos = Vec::with_capacity(seq_len * half);
    let mut sin = Vec::with_capacity(seq_len * half);
    for p in 0..seq_len {
        for i in 0..half {
            let theta = p as f64 * base.powf(-2.0 * i as f64 / d_head as f64);
            cos.push(T::lit(theta.cos()));
            sin.push(T::lit(theta.sin()));
        }
    }
    (cos, sin)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward); zeros
    /// when the node was not on any path to the loss.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Attention probabilities saved by [`causal_attention`](Self::causal_attention),
    /// laid out as `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            MatRef::rm(self.value(a).data(), k),
            MatRef::rm(self.value(b).data(), n),
            T::zero(),
            MatMut::rm(&mut out, n),
        );
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            MatRef::rm(self.value(a).data(), k),
            MatRef::rm_t(self.value(b).data(), k),
            T::zero(),
            MatMut::rm(&mut out, n),
        );
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulBt(a, b), &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.numel() != c {
            return Err(Error::shape("add_row", vx.shape(), vb.shape()));
        }
        let b = vb.data();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + b[i % c]).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        Ok(self.push(out, Op::Scale(x, s), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        Ok(self.push(out, Op::Gelu(x), &[x]))
    }

    /// Row-wise softmax over the last axis, stabilized by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax_rows".into()));
        }
        let c = vx.cols();
        let mut out = vx.data().to_vec();
        let mut buf = Vec::with_capacity(c);
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            for v in row.iter_mut() {
                *v = (*v - max).exp();
            }
            buf.clear();
            buf.extend_from_slice(row);
            let total = order_free_sum(&mut buf);
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Normalization over the last axis: `(x - mean) / sqrt(var + eps) * gain (+ bias)`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Option<Var>, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        if self.value(gain).numel() != d {
            return Err(Error::shape("layer_norm", vx.shape(), self.value(gain).shape()));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != d {
                return Err(Error::shape("layer_norm", vx.shape(), self.value(b).shape()));
            }
        }
        let g = self.value(gain).data();
        let bvals = bias.map(|b| self.value(b).data());
        let dn = T::lit(d as f64);
        let mut out = Vec::with_capacity(vx.numel());
        let mut inv_std = Vec::with_capacity(vx.rows());
        for row in vx.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let y = (v - mean) * inv * g[j];
                out.push(match bvals {
                    Some(b) => y + b[j],
                    None => y,
                });
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let mut inputs = vec![x, gain];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            },
            &inputs,
        ))
    }

    /// Mean over the first axis of an `[n, d]` tensor, returning `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let out = self.mean_rows_grouped(x, 1)?;
        let d = self.value(out).cols();
        self.reshape(out, [d])
    }

    /// Splits the rows into `groups` equal consecutive blocks and averages
    /// each block, returning `[groups, d]`. Column sums are accumulated in
    /// sorted order, so the result is exactly invariant to row permutations
    /// within a block.
    pub fn mean_rows_grouped(&mut self, x: Var, groups: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, d) = (vx.rows(), vx.cols());
        if rows == 0 || groups == 0 {
            return Err(Error::EmptyInput("mean_rows"));
        }
        if rows % groups != 0 {
            return Err(Error::shape("mean_rows", vx.shape(), &[groups]));
        }
        let n = rows / groups;
        let nn = T::lit(n as f64);
        let data = vx.data();
        let mut out = Vec::with_capacity(groups * d);
        let mut buf = Vec::with_capacity(n);
        for g in 0..groups {
            for j in 0..d {
                buf.clear();
                buf.extend((0..n).map(|i| data[(g * n + i) * d + j]));
                out.push(order_free_sum(&mut buf) / nn);
            }
        }
        let out = Tensor::new([groups, d], out)?;
        Ok(self.push(out, Op::MeanRows { x, groups }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::EmptyInput("mean"));
        }
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Row lookup (embedding).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (rows, d) = (vt.rows(), vt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Input(format!("row id {id} out of range for table of {rows} rows")));
            }
            out.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new([ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rotary position rotation applied independently to each head slice.
    /// Row `i` is at position `i % seq_len`; pairs are `(j, j + d_head/2)`.
    pub fn rope(&mut self, x: Var, heads: usize, seq_len: usize, base: f64) -> Result<Var> {
        let vx = self.value(x);
        let (rows, d) = (vx.rows(), vx.cols());
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape("rope", vx.shape(), &[heads, seq_len]));
        }
        let dh = d / heads;
        let half = dh / 2;
        let (cos, sin) = rope_tables::<T>(seq_len, dh, base);
        let mut out = vx.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let p = r % seq_len;
            for h in 0..heads {
                let base_idx = h * dh;
                for i in 0..half {
                    let (c, s) = (cos[p * half + i], sin[p * half + i]);
                    let x1 = row[base_idx + i];
                    let x2 = row[base_idx + i + half];
                    row[base_idx + i] = x1 * c - x2 * s;
                    row[base_idx + i + half] = x1 * s + x2 * c;
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::Rope {
                x,
                heads,
                seq_len,
                cos,
                sin,
            },
            &[x],
        ))
    }

    /// Multi-head causal scaled dot-product attention over consecutive
    /// blocks of `seq_len` rows. Inputs are `[batch*seq_len, heads*d_head]`;
    /// the output holds the concatenated per-head results.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Result<Var> {
        let vq = self.value(q);
        if vq.shape() != self.value(k).shape() || vq.shape() != self.value(v).shape() {
            return Err(Error::shape("attention", vq.shape(), self.value(k).shape()));
        }
        let (rows, d) = (vq.rows(), vq.cols());
        if heads == 0 || d % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape("attention", vq.shape(), &[heads, seq_len]));
        }
        let n = seq_len;
        let batch = rows / n;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (vq.data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * n * n];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * n * d + h * dh;
                let p = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
                gemm(
                    n,
                    dh,
                    n,
                    scale,
                    MatRef::new(qd, off, d, 1),
                    MatRef::new(kd, off, 1, d),
                    T::zero(),
                    MatMut::rm(p, n),
                );
                for i in 0..n {
                    let row = &mut p[i * n..(i + 1) * n];
                    let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for x in row[..=i].iter_mut() {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    for x in row[..=i].iter_mut() {
                        *x /= total;
                    }
                    for x in row[i + 1..].iter_mut() {
                        *x = T::zero();
                    }
                }
                gemm(
                    n,
                    n,
                    dh,
                    T::one(),
                    MatRef::rm(p, n),
                    MatRef::new(vd, off, d, 1),
                    T::zero(),
                    MatMut::new(&mut out, off, d, 1),
                );
            }
        }
        let out = Tensor::new(vq.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        let mut out = vx.data().to_vec();
        let mut norms = Vec::with_capacity(vx.rows());
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(norm);
            let denom = norm.max(eps);
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::NormalizeRows { x, eps, norms }, &[x]))
    }

    /// Directional suppression of per-head outputs:
    /// `o'_h = o_h - Σ_k r_{h,k} (o_h · d_{h,k}) d_{h,k}`.
    ///
    /// `o` is `[batch*seq_len, heads*d_head]`, `dirs` is `[heads*k, d_head]`
    /// (row `h*k + j`), and `r` is `[batch, heads*k]` with one routing
    /// decision per sequence.
    pub fn suppress(&mut self, o: Var, dirs: Var, r: Var, heads: usize, k: usize, seq_len: usize) -> Result<Var> {
        let (vo, vd, vr) = (self.value(o), self.value(dirs), self.value(r));
        let (rows, d) = (vo.rows(), vo.cols());
        if heads == 0 || d % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape("suppress", vo.shape(), vd.shape()));
        }
        let dh = d / heads;
        let batch = rows / seq_len;
        if vd.rows() != heads * k || vd.cols() != dh {
            return Err(Error::shape("suppress", vo.shape(), vd.shape()));
        }
        if vr.rows() != batch || vr.cols() != heads * k {
            return Err(Error::shape("suppress", vo.shape(), vr.shape()));
        }
        let (dd, rd) = (vd.data(), vr.data());
        let mut out = vo.data().to_vec();
        let mut acc = vec![T::zero(); dh];
        for (t, row) in out.chunks_mut(d).enumerate() {
            let s = t / seq_len;
            for h in 0..heads {
                let oh = &mut row[h * dh..(h + 1) * dh];
                acc.iter_mut().for_each(|a| *a = T::zero());
                for j in 0..k {
                    let dir = &dd[(h * k + j) * dh..(h * k + j + 1) * dh];
                    let c = oh.iter().zip(dir).map(|(&a, &b)| a * b).sum::<T>();
                    let coef = rd[s * heads * k + h * k + j] * c;
                    for (a, &dv) in acc.iter_mut().zip(dir) {
                        *a += coef * dv;
                    }
                }
                for (x, &a) in oh.iter_mut().zip(&acc) {
                    *x -= a;
                }
            }
        }
        let out = Tensor::new(vo.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::Suppress {
                o,
                dirs,
                r,
                heads,
                k,
                seq_len,
            },
            &[o, dirs, r],
        ))
    }

    /// Replaces masked entries with fixed values; gradient flows only
    /// through unmasked entries.
    pub fn override_entries(&mut self, x: Var, mask: &[bool], values: &[T]) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.numel() || values.len() != vx.numel() {
            return Err(Error::shape("override_entries", vx.shape(), &[mask.len()]));
        }
        let data = vx
            .data()
            .iter()
            .zip(mask.iter().zip(values))
            .map(|(&v, (&m, &w))| if m { w } else { v })
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::Override {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Mean next-token cross-entropy of `[n, vocab]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (n, v) = (vl.rows(), vl.cols());
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", vl.shape(), &[targets.len()]));
        }
        if n == 0 {
            return Err(Error::EmptyInput("cross_entropy"));
        }
        let mut probs = Vec::with_capacity(n * v);
        let mut total = T::zero();
        for (row, &t) in vl.data().chunks(v).zip(targets) {
            if t >= v {
                return Err(Error::Input(format!("target id {t} out of range for vocab {v}")));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z = row.iter().map(|&x| (x - max).exp()).sum::<T>();
            let lz = z.ln();
            total += lz - (row[t] - max);
            probs.extend(row.iter().map(|&x| (x - max).exp() / z));
        }
        let loss = total / T::lit(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires them. Gradients from all paths are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let Tape { nodes, grads } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            backprop(nodes, grads, i, &g);
        }
        Ok(())
    }
}

fn slot<'g, T: Scalar>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
    if let Some(s) = slot(nodes, grads, v) {
        for (i, x) in s.iter_mut().enumerate() {
            *x += f(i);
        }
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if let Some(s) = slot(nodes, grads, *a) {
                gemm(m, n, k, T::one(), MatRef::rm(g, n), MatRef::rm_t(vb.data(), n), T::one(), MatMut::rm(s, k));
            }
            if let Some(s) = slot(nodes, grads, *b) {
                gemm(k, m, n, T::one(), MatRef::rm_t(va.data(), k), MatRef::rm(g, n), T::one(), MatMut::rm(s, n));
            }
        }
        Op::MatMulBt(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
            if let Some(s) = slot(nodes, grads, *a) {
                gemm(m, n, k, T::one(), MatRef::rm(g, n), MatRef::rm(vb.data(), k), T::one(), MatMut::rm(s, k));
            }
            if let Some(s) = slot(nodes, grads, *b) {
                gemm(n, m, k, T::one(), MatRef::rm_t(g, n), MatRef::rm(va.data(), k), T::one(), MatMut::rm(s, k));
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |j| g[j]);
            accumulate(nodes, grads, *b, |j| g[j]);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |j| g[j]);
            accumulate(nodes, grads, *b, |j| -g[j]);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            accumulate(nodes, grads, *a, |j| g[j] * vb[j]);
            accumulate(nodes, grads, *b, |j| g[j] * va[j]);
        }
        Op::AddRow(x, bias) => {
            accumulate(nodes, grads, *x, |j| g[j]);
            let c = out.cols();
            if let Some(s) = slot(nodes, grads, *bias) {
                for row in g.chunks(c) {
                    for (acc, &v) in s.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
        }
        Op::Scale(x, s) => accumulate(nodes, grads, *x, |j| g[j] * *s),
        Op::Sigmoid(x) => {
            let y = out.data();
            accumulate(nodes, grads, *x, |j| g[j] * y[j] * (T::one() - y[j]));
        }
        Op::Gelu(x) => {
            let vx = nodes[x.0].value.data();
            accumulate(nodes, grads, *x, |j| g[j] * gelu_parts(vx[j]).1);
        }
        Op::SoftmaxRows(x) => {
            let c = out.cols();
            let y = out.data();
            if let Some(s) = slot(nodes, grads, *x) {
                for r in 0..out.rows() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..c {
                        s[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            inv_std,
        } => {
            let vx = &nodes[x.0].value;
            let d = vx.cols();
            let dn = T::lit(d as f64);
            let gv = nodes[gain.0].value.data();
            let mut xhat = vec![T::zero(); d];
            let mut dxhat = vec![T::zero(); d];
            let mut dgain = vec![T::zero(); d];
            let mut dbias = vec![T::zero(); d];
            let mut dx = vec![T::zero(); vx.numel()];
            for (r, row) in vx.data().chunks(d).enumerate() {
                let mean = row.iter().copied().sum::<T>() / dn;
                let inv = inv_std[r];
                let gr = &g[r * d..(r + 1) * d];
                for j in 0..d {
                    xhat[j] = (row[j] - mean) * inv;
                    dxhat[j] = gr[j] * gv[j];
                    dgain[j] += gr[j] * xhat[j];
                    dbias[j] += gr[j];
                }
                let m1 = dxhat.iter().copied().sum::<T>() / dn;
                let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
                for j in 0..d {
                    dx[r * d + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            accumulate(nodes, grads, *x, |j| dx[j]);
            accumulate(nodes, grads, *gain, |j| dgain[j]);
            if let Some(b) = bias {
                accumulate(nodes, grads, *b, |j| dbias[j]);
            }
        }
        Op::MeanRows { x, groups } => {
            let vx = &nodes[x.0].value;
            let d = vx.cols();
            let n = vx.rows() / groups;
            let inv = T::one() / T::lit(n as f64);
            accumulate(nodes, grads, *x, |j| {
                let (row, col) = (j / d, j % d);
                g[(row / n) * d + col] * inv
            });
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, |_| g[0]),
        Op::Gather { table, ids } => {
            let d = out.cols();
            if let Some(s) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        s[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Rope {
            x,
            heads,
            seq_len,
            cos,
            sin,
        } => {
            let d = out.cols();
            let dh = d / heads;
            let half = dh / 2;
            if let Some(s) = slot(nodes, grads, *x) {
                for r in 0..out.rows() {
                    let p = r % seq_len;
                    for h in 0..*heads {
                        let base = r * d + h * dh;
                        for i in 0..half {
                            let (c, sn) = (cos[p * half + i], sin[p * half + i]);
                            let (g1, g2) = (g[base + i], g[base + i + half]);
                            s[base + i] += g1 * c + g2 * sn;
                            s[base + i + half] += g2 * c - g1 * sn;
                        }
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            seq_len,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), *heads, *seq_len, probs),
        Op::NormalizeRows { x, eps, norms } => {
            let d = out.cols();
            let y = out.data();
            if let Some(s) = slot(nodes, grads, *x) {
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    if norm > *eps {
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..d {
                            s[r * d + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..d {
                            s[r * d + j] += gr[j] / *eps;
                        }
                    }
                }
            }
        }
        Op::Suppress {
            o,
            dirs,
            r,
            heads,
            k,
            seq_len,
        } => suppress_backward(nodes, grads, g, (*o, *dirs, *r), *heads, *k, *seq_len),
        Op::Override { x, mask } => accumulate(nodes, grads, *x, |j| if mask[j] { T::zero() } else { g[j] }),
        Op::Reshape(x) => accumulate(nodes, grads, *x, |j| g[j]),
        Op::CrossEntropy { logits, targets, probs } => {
            let v = nodes[logits.0].value.cols();
            let scale = g[0] / T::lit(targets.len() as f64);
            accumulate(nodes, grads, *logits, |j| {
                let (row, col) = (j / v, j % v);
                let onehot = if targets[row] == col { T::one() } else { T::zero() };
                (probs[j] - onehot) * scale
            });
        }
    }
}

fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    (q, k, v): (Var, Var, Var),
    heads: usize,
    n: usize,
    probs: &[T],
) {
    let vq = &nodes[q.0].value;
    let (rows, d) = (vq.rows(), vq.cols());
    let batch = rows / n;
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (qd, kd, vd) = (vq.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
    let mut dp = vec![T::zero(); n * n];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * n * d + h * dh;
            let p = &probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
            if let Some(s) = slot(nodes, grads, v) {
                gemm(n, n, dh, T::one(), MatRef::rm_t(p, n), MatRef::new(g, off, d, 1), T::one(), MatMut::new(s, off, d, 1));
            }
            if !(nodes[q.0].requires_grad || nodes[k.0].requires_grad) {
                continue;
            }
            gemm(n, dh, n, T::one(), MatRef::new(g, off, d, 1), MatRef::new(vd, off, 1, d), T::zero(), MatMut::rm(&mut dp, n));
            for i in 0..n {
                let pr = &p[i * n..(i + 1) * n];
                let row = &mut dp[i * n..(i + 1) * n];
                let dot = pr[..=i].iter().zip(&row[..=i]).map(|(&a, &b)| a * b).sum::<T>();
                for j in 0..n {
                    row[j] = if j <= i { pr[j] * (row[j] - dot) } else { T::zero() };
                }
            }
            if let Some(s) = slot(nodes, grads, q) {
                gemm(n, n, dh, scale, MatRef::rm(&dp, n), MatRef::new(kd, off, d, 1), T::one(), MatMut::new(s, off, d, 1));
            }
            if let Some(s) = slot(nodes, grads, k) {
                gemm(n, n, dh, scale, MatRef::rm_t(&dp, n), MatRef::new(qd, off, d, 1), T::one(), MatMut::new(s, off, d, 1));
            }
        }
    }
}

fn suppress_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    (o, dirs, r): (Var, Var, Var),
    heads: usize,
    k: usize,
    seq_len: usize,
) {
    let vo = &nodes[o.0].value;
    let d = vo.cols();
    let dh = d / heads;
    let (od, dd, rd) = (vo.data(), nodes[dirs.0].value.data(), nodes[r.0].value.data());
    let need_o = nodes[o.0].requires_grad;
    let need_d = nodes[dirs.0].requires_grad;
    let need_r = nodes[r.0].requires_grad;
    let mut go = if need_o { g.to_vec() } else { Vec::new() };
    let mut gd = vec![T::zero(); if need_d { dd.len() } else { 0 }];
    let mut gr = vec![T::zero(); if need_r { rd.len() } else { 0 }];
    for t in 0..vo.rows() {
        let s = t / seq_len;
        for h in 0..heads {
            let base = t * d + h * dh;
            let oh = &od[base..base + dh];
            let gh = &g[base..base + dh];
            for j in 0..k {
                let row = h * k + j;
                let dir = &dd[row * dh..(row + 1) * dh];
                let rv = rd[s * heads * k + row];
                let c = oh.iter().zip(dir).map(|(&a, &b)| a * b).sum::<T>();
                let gdot = gh.iter().zip(dir).map(|(&a, &b)| a * b).sum::<T>();
                if need_o {
                    for (x, &dv) in go[base..base + dh].iter_mut().zip(dir) {
                        *x -= rv * gdot * dv;
                    }
                }
                if need_r {
                    gr[s * heads * k + row] -= c * gdot;
                }
                if need_d {
                    for m in 0..dh {
                        gd[row * dh + m] -= rv * (gdot * oh[m] + c * gh[m]);
                    }
                }
            }
        }
    }
    if need_o {
        accumulate(nodes, grads, o, |j| go[j]);
    }
    if need_d {
        accumulate(nodes, grads, dirs, |j| gd[j]);
    }
    if need_r {
        accumulate(nodes, grads, r, |j| gr[j]);
    }
}
