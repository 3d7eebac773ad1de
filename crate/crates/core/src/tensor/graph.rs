use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::kernels::{self, hardtanh, sigmoid};
use super::Tensor;
use crate::{Error, Real, Result};

/// Guard on the denominator of [`Graph::weighted_norm`].
pub const WEIGHTED_NORM_EPS: f64 = 1e-8;
/// Variance guard of [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How [`Graph::cross_entropy`] reduces over rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Stack(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    Softmax(Var),
    WeightedNorm { x: Var, w: Var, denom: Vec<(T, bool)> },
    Relu(Var),
    HardTanh(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, scale: T },
    Sum(Var),
    Mean(Var),
    RevCumprod(Var),
    BatchDot { mem: Var, query: Var },
    BatchWeightedSum { weights: Var, mem: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for reverse-mode differentiation.
///
/// Every kernel appends one node; nodes only reference earlier nodes, so the
/// node list is already in topological order. A graph is confined to the
/// thread that builds it.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every `requires_grad` leaf after [`Graph::backward`].
pub struct Gradients<T> {
    leaves: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::variable`]; `None` for
    /// constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.remove(&v.0)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of a broadcast.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(Error::UnknownVar(v.0))
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

    /// A constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, kernel: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, ())> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        if sa == sb {
            let data = na.value.data().iter().zip(nb.value.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok((Tensor::new(sa.to_vec(), data)?, ()));
        }
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::Shape {
            kernel,
            left: sa.to_vec(),
            right: sb.to_vec(),
        })?;
        let (ta, tb) = (broadcast_strides(sa, &out), broadcast_strides(sb, &out));
        let (da, db) = (na.value.data(), nb.value.data());
        let mut data = vec![T::zero(); out.iter().product()];
        for_each_broadcast(&out, &ta, &tb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Ok((Tensor::new(out, data)?, ()))
    }

    /// Elementwise `a + b` with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ()) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise `a - b` with numpy-style broadcasting.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ()) = self.binary("subtract", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise `a * b` with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ()) = self.binary("multiply", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let n = self.node(x)?;
        let data = n.value.data().iter().map(|&v| f(v)).collect();
        Tensor::new(n.value.shape().to_vec(), data)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.unary(x, |v| v * c)?;
        Ok(self.push(t, Op::Scale(x, c), &[x]))
    }

    /// `x + c` for a scalar constant.
    pub fn shift(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.unary(x, |v| v + c)?;
        Ok(self.push(t, Op::Shift(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, |v| v.max(T::zero()))?;
        Ok(self.push(t, Op::Relu(x), &[x]))
    }

    /// `max(-1, min(1, x))`
    pub fn hardtanh(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, hardtanh)?;
        Ok(self.push(t, Op::HardTanh(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, sigmoid)?;
        Ok(self.push(t, Op::Sigmoid(x), &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, |v| v.tanh())?;
        Ok(self.push(t, Op::Tanh(x), &[x]))
    }

    /// `a[.., k] · b[k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape {
                kernel: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (na.value.rows(), sb[0], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(na.value.data(), nb.value.data(), m, k, n, &mut out);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[.., k] · b[n, k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(Error::Shape {
                kernel: "matmul_bt",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (na.value.rows(), sb[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_bt(na.value.data(), nb.value.data(), m, k, n, &mut out);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMulBt(a, b), &[a, b]))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat inputs"))?;
        let lead = {
            let s = self.node(first)?.value.shape();
            if s.is_empty() {
                return Err(Error::Shape {
                    kernel: "concat",
                    left: s.to_vec(),
                    right: Vec::new(),
                });
            }
            s[..s.len() - 1].to_vec()
        };
        let mut total = 0;
        for &x in xs {
            let s = self.node(x)?.value.shape();
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::Shape {
                    kernel: "concat",
                    left: self.nodes[first.0].value.shape().to_vec(),
                    right: s.to_vec(),
                });
            }
            total += s[lead.len()];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.nodes[x.0].value.row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat(xs.to_vec()), xs))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.node(x)?;
        let s = n.value.shape();
        if s.is_empty() || start + len > s[s.len() - 1] {
            return Err(Error::Shape {
                kernel: "slice",
                left: s.to_vec(),
                right: vec![start, start + len],
            });
        }
        let rows = n.value.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&n.value.row(r)[start..start + len]);
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Slice { x, start }, &[x]))
    }

    /// Stacks `[B, H]` tensors into `[B, n, H]`.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("stack inputs"))?;
        let s0 = self.node(first)?.value.shape().to_vec();
        if s0.len() != 2 {
            return Err(Error::Shape {
                kernel: "stack",
                left: s0,
                right: Vec::new(),
            });
        }
        for &x in xs {
            let s = self.node(x)?.value.shape();
            if s != &s0[..] {
                return Err(Error::Shape {
                    kernel: "stack",
                    left: s0,
                    right: s.to_vec(),
                });
            }
        }
        let (b, h, n) = (s0[0], s0[1], xs.len());
        let mut data = Vec::with_capacity(b * n * h);
        for r in 0..b {
            for &x in xs {
                data.extend_from_slice(self.nodes[x.0].value.row(r));
            }
        }
        let t = Tensor::new(vec![b, n, h], data)?;
        Ok(self.push(t, Op::Stack(xs.to_vec()), xs))
    }

    /// Embedding lookup: rows `ids` of a `[V, E]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let n = self.node(table)?;
        let s = n.value.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                kernel: "gather",
                left: s.to_vec(),
                right: vec![ids.len()],
            });
        }
        let (v, e) = (s[0], s[1]);
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            data.extend_from_slice(n.value.row(id));
        }
        let t = Tensor::new(vec![ids.len(), e], data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Softmax over the last axis. `-inf` entries act as masks; a row with
    /// nothing left unmasked is an error.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let cols = n.value.cols();
        let mut data = n.value.data().to_vec();
        for (r, row) in data.chunks_mut(cols).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            if max == T::neg_infinity() {
                return Err(Error::AllMasked { kernel: "softmax", row: r });
            }
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(n.value.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// `x ⊙ w / max(Σ w, ε)` per row of the last axis.
    pub fn weighted_norm(&mut self, x: Var, w: Var) -> Result<Var> {
        let (nx, nw) = (self.node(x)?, self.node(w)?);
        if nx.value.shape() != nw.value.shape() {
            return Err(Error::Shape {
                kernel: "weighted_norm",
                left: nx.value.shape().to_vec(),
                right: nw.value.shape().to_vec(),
            });
        }
        let eps = T::lit(WEIGHTED_NORM_EPS);
        let cols = nx.value.cols();
        let mut data = Vec::with_capacity(nx.value.len());
        let mut denom = Vec::with_capacity(nx.value.rows());
        for (xr, wr) in nx.value.data().chunks(cols).zip(nw.value.data().chunks(cols)) {
            let s: T = wr.iter().copied().sum();
            let (d, clamped) = if s > eps { (s, false) } else { (eps, true) };
            denom.push((d, clamped));
            data.extend(xr.iter().zip(wr).map(|(&a, &b)| a * b / d));
        }
        let t = Tensor::new(nx.value.shape().to_vec(), data)?;
        Ok(self.push(t, Op::WeightedNorm { x, w, denom }, &[x, w]))
    }

    /// Layer normalization over the last axis with per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let nx = self.node(x)?;
        let cols = nx.value.cols();
        for p in [gain, bias] {
            let s = self.node(p)?.value.shape();
            if s != [cols] {
                return Err(Error::Shape {
                    kernel: "layer_norm",
                    left: nx.value.shape().to_vec(),
                    right: s.to_vec(),
                });
            }
        }
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let eps = T::lit(LAYER_NORM_EPS);
        let nf = T::lit(cols as f64);
        let mut xhat = Vec::with_capacity(nx.value.len());
        let mut rstd = Vec::with_capacity(nx.value.rows());
        let mut out = Vec::with_capacity(nx.value.len());
        for row in nx.value.data().chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let t = Tensor::new(nx.value.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Inverted dropout: with an RNG, zeroes each element with probability `p`
    /// and scales survivors by `1/(1-p)`; without one (eval mode) it is the
    /// identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return Ok(x),
        };
        if !(0.0..1.0).contains(&p) {
            return Err(Error::OutOfUnitRange {
                what: "dropout rate",
                value: p,
            });
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.node(x)?;
        let mask: Vec<T> = (0..n.value.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = n.value.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(n.value.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Cross-entropy of `[N, V]` logits against per-row targets; `None`
    /// targets are masked out.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], reduction: Reduction) -> Result<Var> {
        let n = self.node(logits)?;
        let (rows, v) = (n.value.rows(), n.value.cols());
        if targets.len() != rows {
            return Err(Error::Length {
                what: "cross-entropy targets",
                expected: rows,
                found: targets.len(),
            });
        }
        let mut probs = Vec::with_capacity(n.value.len());
        let mut total = T::zero();
        let mut count = 0usize;
        for (row, target) in n.value.data().chunks(v).zip(targets) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let z: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + z.ln();
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
            if let Some(t) = *target {
                if t >= v {
                    return Err(Error::TokenOutOfRange { id: t, vocab: v });
                }
                total += lse - row[t];
                count += 1;
            }
        }
        let scale = match reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean if count == 0 => return Err(Error::Empty("cross-entropy targets")),
            Reduction::Mean => T::one() / T::lit(count as f64),
        };
        let t = Tensor::scalar(total * scale);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.node(x)?.value.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        if n.value.is_empty() {
            return Err(Error::Empty("mean input"));
        }
        let s: T = n.value.data().iter().copied().sum::<T>() / T::lit(n.value.len() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Exclusive reverse cumulative product over the last axis:
    /// `out_i = ∏_{j > i} x_j`, so the last entry is the empty product 1.
    pub fn rev_cumprod(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let cols = n.value.cols();
        let mut data = vec![T::zero(); n.value.len()];
        for (src, dst) in n.value.data().chunks(cols).zip(data.chunks_mut(cols)) {
            let mut acc = T::one();
            for i in (0..cols).rev() {
                dst[i] = acc;
                acc *= src[i];
            }
        }
        let t = Tensor::new(n.value.shape().to_vec(), data)?;
        Ok(self.push(t, Op::RevCumprod(x), &[x]))
    }

    /// `out[b, i] = ⟨mem[b, i, :], query[b, :]⟩`
    pub fn batch_dot(&mut self, mem: Var, query: Var) -> Result<Var> {
        let (nm, nq) = (self.node(mem)?, self.node(query)?);
        let (sm, sq) = (nm.value.shape(), nq.value.shape());
        if sm.len() != 3 || sq.len() != 2 || sm[0] != sq[0] || sm[2] != sq[1] {
            return Err(Error::Shape {
                kernel: "batch_dot",
                left: sm.to_vec(),
                right: sq.to_vec(),
            });
        }
        let (b, n, h) = (sm[0], sm[1], sm[2]);
        let (m, q) = (nm.value.data(), nq.value.data());
        let mut out = Vec::with_capacity(b * n);
        for bi in 0..b {
            let qr = &q[bi * h..(bi + 1) * h];
            for i in 0..n {
                let off = (bi * n + i) * h;
                out.push(kernels::dot(&m[off..off + h], qr));
            }
        }
        let t = Tensor::new(vec![b, n], out)?;
        Ok(self.push(t, Op::BatchDot { mem, query }, &[mem, query]))
    }

    /// `out[b, :] = Σ_i weights[b, i] · mem[b, i, :]`
    pub fn batch_weighted_sum(&mut self, weights: Var, mem: Var) -> Result<Var> {
        let (nw, nm) = (self.node(weights)?, self.node(mem)?);
        let (sw, sm) = (nw.value.shape(), nm.value.shape());
        if sm.len() != 3 || sw.len() != 2 || sm[0] != sw[0] || sm[1] != sw[1] {
            return Err(Error::Shape {
                kernel: "batch_weighted_sum",
                left: sw.to_vec(),
                right: sm.to_vec(),
            });
        }
        let (b, n, h) = (sm[0], sm[1], sm[2]);
        let (w, m) = (nw.value.data(), nm.value.data());
        let mut out = vec![T::zero(); b * h];
        for bi in 0..b {
            let orow = &mut out[bi * h..(bi + 1) * h];
            for i in 0..n {
                let off = (bi * n + i) * h;
                kernels::axpy(w[bi * n + i], &m[off..off + h], orow);
            }
        }
        let t = Tensor::new(vec![b, h], out)?;
        Ok(self.push(t, Op::BatchWeightedSum { weights, mem }, &[weights, mem]))
    }

    /// Smallest distance between any relu or hardtanh input and a kink of
    /// that function. Gradient checks resample when this is too small.
    pub fn kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) if node.requires_grad => {
                    for &v in self.nodes[x.0].value.data() {
                        best = best.min(v.as_f64().abs());
                    }
                }
                Op::HardTanh(x) if node.requires_grad => {
                    for &v in self.nodes[x.0].value.data() {
                        let v = v.as_f64();
                        best = best.min((v - 1.0).abs()).min((v + 1.0).abs());
                    }
                }
                _ => {}
            }
        }
        best
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph: a second call
    /// returns [`Error::GraphConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.node(loss)?.value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss { shape });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => {
                    if matches!(node.op, Op::Leaf) {
                        leaves.insert(i, Tensor::zeros(node.value.shape().to_vec()));
                    }
                    continue;
                }
            };
            if matches!(node.op, Op::Leaf) {
                leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { leaves })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let out = node.value.data();

        // Gradient buffer of an input, allocated on first use; `None` for
        // inputs that do not need gradients.
        fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
        }

        let broadcast_back = |grads: &mut [Option<Vec<T>>], a: Var, b: Var, da: &dyn Fn(usize, usize) -> T, db: &dyn Fn(usize, usize) -> T| {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let out_shape = node.value.shape();
            let (ta, tb) = (broadcast_strides(sa, out_shape), broadcast_strides(sb, out_shape));
            if let Some(ga) = slot(nodes, grads, a) {
                for_each_broadcast(out_shape, &ta, &tb, |o, ia, ib| ga[ia] += g[o] * da(ia, ib));
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for_each_broadcast(out_shape, &ta, &tb, |o, ia, ib| gb[ib] += g[o] * db(ia, ib));
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => broadcast_back(grads, *a, *b, &|_, _| T::one(), &|_, _| T::one()),
            Op::Sub(a, b) => broadcast_back(grads, *a, *b, &|_, _| T::one(), &|_, _| -T::one()),
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                broadcast_back(grads, *a, *b, &|_, ib| vb[ib], &|ia, _| va[ia]);
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (d, &go) in gx.iter_mut().zip(g) {
                        *d += go * *c;
                    }
                }
            }
            Op::Shift(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (d, &go) in gx.iter_mut().zip(g) {
                        *d += go;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), tb.shape()[0], tb.shape()[1]);
                let (va, vb) = (ta.data(), tb.data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    kernels::acc_matmul_bt(g, vb, m, n, k, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    kernels::acc_at_matmul(va, g, m, k, n, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), tb.shape()[1], tb.shape()[0]);
                let (va, vb) = (ta.data(), tb.data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    kernels::acc_matmul(g, vb, m, n, k, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    kernels::acc_gt_matmul(g, va, m, n, k, gb);
                }
            }
            Op::Concat(xs) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &x in xs {
                    let c = nodes[x.0].value.cols();
                    if let Some(gx) = slot(nodes, grads, x) {
                        for r in 0..rows {
                            for j in 0..c {
                                gx[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let len = node.value.cols();
                let c = nodes[x.0].value.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..node.value.rows() {
                        for j in 0..len {
                            gx[r * c + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::Stack(xs) => {
                let s = node.value.shape();
                let (b, n, h) = (s[0], s[1], s[2]);
                for (i, &x) in xs.iter().enumerate() {
                    if let Some(gx) = slot(nodes, grads, x) {
                        for r in 0..b {
                            let off = (r * n + i) * h;
                            for (d, &go) in gx[r * h..(r + 1) * h].iter_mut().zip(&g[off..off + h]) {
                                *d += go;
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let e = node.value.cols();
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, &go) in gt[id * e..(id + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]) {
                            *d += go;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((y, go), d) in out.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dotp: T = y.iter().zip(go).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            d[j] += y[j] * (go[j] - dotp);
                        }
                    }
                }
            }
            Op::WeightedNorm { x, w, denom } => {
                let cols = node.value.cols();
                let (vx, vw) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, &(d, _)) in denom.iter().enumerate() {
                        for j in r * cols..(r + 1) * cols {
                            gx[j] += g[j] * vw[j] / d;
                        }
                    }
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    for (r, &(d, clamped)) in denom.iter().enumerate() {
                        let range = r * cols..(r + 1) * cols;
                        let cross: T = if clamped {
                            T::zero()
                        } else {
                            range.clone().map(|j| g[j] * out[j]).sum::<T>() / d
                        };
                        for j in range {
                            gw[j] += g[j] * vx[j] / d - cross;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &go), &y) in gx.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *d += go;
                        }
                    }
                }
            }
            Op::HardTanh(x) => {
                let vx = nodes[x.0].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &go), &v) in gx.iter_mut().zip(g).zip(vx) {
                        if v.abs() <= T::one() {
                            *d += go;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &go), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += go * y * (T::one() - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &go), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += go * (T::one() - y * y);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = node.value.cols();
                let gv = nodes[gain.0].value.data();
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for row in g.chunks(cols) {
                        for (d, &go) in gb.iter_mut().zip(row) {
                            *d += go;
                        }
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (row, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((d, &go), &xh) in gg.iter_mut().zip(row).zip(xr) {
                            *d += go * xh;
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let nf = T::lit(cols as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * cols..(r + 1) * cols;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in range.clone() {
                            let dxh = g[j] * gv[j - r * cols];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[j];
                        }
                        for j in range {
                            let dxh = g[j] * gv[j - r * cols];
                            gx[j] += rs / nf * (nf * dxh - sum_d - xhat[j] * sum_dx);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &go), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += go * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let v = nodes[logits.0].value.cols();
                let go = g[0] * *scale;
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (r, target) in targets.iter().enumerate() {
                        if let Some(t) = *target {
                            for j in 0..v {
                                gl[r * v + j] += go * probs[r * v + j];
                            }
                            gl[r * v + t] -= go;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::lit(nodes[x.0].value.len() as f64);
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::RevCumprod(x) => {
                let cols = node.value.cols();
                let vx = nodes[x.0].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    // dx_j = out_j · Σ_{i<j} g_i ∏_{i<k<j} x_k, accumulated left to right.
                    for r in 0..node.value.rows() {
                        let base = r * cols;
                        let mut acc = T::zero();
                        for j in 0..cols {
                            gx[base + j] += out[base + j] * acc;
                            acc = acc * vx[base + j] + g[base + j];
                        }
                    }
                }
            }
            Op::BatchDot { mem, query } => {
                let s = nodes[mem.0].value.shape();
                let (b, n, h) = (s[0], s[1], s[2]);
                let (vm, vq) = (nodes[mem.0].value.data(), nodes[query.0].value.data());
                if let Some(gm) = slot(nodes, grads, *mem) {
                    for bi in 0..b {
                        for i in 0..n {
                            let off = (bi * n + i) * h;
                            kernels::axpy(g[bi * n + i], &vq[bi * h..(bi + 1) * h], &mut gm[off..off + h]);
                        }
                    }
                }
                if let Some(gq) = slot(nodes, grads, *query) {
                    for bi in 0..b {
                        for i in 0..n {
                            let off = (bi * n + i) * h;
                            kernels::axpy(g[bi * n + i], &vm[off..off + h], &mut gq[bi * h..(bi + 1) * h]);
                        }
                    }
                }
            }
            Op::BatchWeightedSum { weights, mem } => {
                let s = nodes[mem.0].value.shape();
                let (b, n, h) = (s[0], s[1], s[2]);
                let (vw, vm) = (nodes[weights.0].value.data(), nodes[mem.0].value.data());
                if let Some(gw) = slot(nodes, grads, *weights) {
                    for bi in 0..b {
                        for i in 0..n {
                            let off = (bi * n + i) * h;
                            gw[bi * n + i] += kernels::dot(&g[bi * h..(bi + 1) * h], &vm[off..off + h]);
                        }
                    }
                }
                if let Some(gm) = slot(nodes, grads, *mem) {
                    for bi in 0..b {
                        for i in 0..n {
                            let off = (bi * n + i) * h;
                            kernels::axpy(vw[bi * n + i], &g[bi * h..(bi + 1) * h], &mut gm[off..off + h]);
                        }
                    }
                }
            }
        }
    }
}
