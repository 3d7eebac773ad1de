//! Parsing network: syntactic distances from a causal convolution over
//! embeddings, and the stick-breaking gates derived from them.
//!
//! Index conventions: `d[i]` is the distance between tokens `i-1` and `i`
//! (`d[0]` is measured against front padding). For a query at step `t`,
//! `α_j^t` compares `d[t]` with `d[j]` and the gate onto memory position `i`
//! is `g_i^t = ∏_{j=i+1}^{t-1} α_j^t`.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{BoundParams, ParamId, ParamSet};
use crate::tensor::{kernels::hardtanh, Graph, Tensor, Var};
use crate::{Error, Real, Result};

/// Per-token syntactic distances of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceProfile<T>(Vec<T>);

impl<T: Real> DistanceProfile<T> {
    /// Wraps distances, rejecting negative or non-finite entries.
    pub fn new(d: Vec<T>) -> Result<Self> {
        if let Some(&bad) = d.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(Error::Config(alloc::format!("distance {bad} is not a finite non-negative value")));
        }
        Ok(DistanceProfile(d))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    /// Distances strictly inside the sequence (`d[1..]`), as consumed by the
    /// tree decoder.
    pub fn internal(&self) -> &[T] {
        if self.0.is_empty() {
            &self.0
        } else {
            &self.0[1..]
        }
    }
}

/// `(hardtanh((d_t - d_j)·τ) + 1) / 2`
pub fn soft_alpha<T: Real>(d_t: T, d_j: T, tau: T) -> T {
    (hardtanh((d_t - d_j) * tau) + T::one()) / T::lit(2.0)
}

/// Limit of [`soft_alpha`] as `τ → ∞`: `(sign(d_t - d_j) + 1) / 2`.
pub fn hard_alpha<T: Real>(d_t: T, d_j: T) -> T {
    if d_t > d_j {
        T::one()
    } else if d_t < d_j {
        T::zero()
    } else {
        T::lit(0.5)
    }
}

fn check_alphas<T: Real>(alphas: &[T]) -> Result<()> {
    match alphas.iter().find(|&&a| !(a >= T::zero() && a <= T::one())) {
        Some(&a) => Err(Error::OutOfUnitRange {
            what: "alpha",
            value: a.as_f64(),
        }),
        None => Ok(()),
    }
}

/// Gate row for one step `t`: `alphas[j] = α_j^t` for `j < t` (entry 0 is
/// never used), result `[g_0^t, …, g_{t-1}^t]`.
pub fn gate_row<T: Real>(alphas: &[T]) -> Result<Vec<T>> {
    check_alphas(alphas)?;
    let mut g = vec![T::one(); alphas.len()];
    let mut acc = T::one();
    for i in (0..alphas.len()).rev() {
        g[i] = acc;
        acc *= alphas[i];
    }
    Ok(g)
}

/// Stick-breaking distribution of the left boundary `l_t` for one step:
/// `p(l_t = i) = (1 - α_i) ∏_{j>i} α_j` for `i ≥ 1` and
/// `p(l_t = 0) = ∏_{j≥1} α_j`.
pub fn structure_probs<T: Real>(alphas: &[T]) -> Result<Vec<T>> {
    if alphas.is_empty() {
        return Err(Error::Empty("alphas"));
    }
    check_alphas(alphas)?;
    let t = alphas.len();
    let mut p = vec![T::zero(); t];
    let mut remaining = T::one();
    for i in (1..t).rev() {
        p[i] = (T::one() - alphas[i]) * remaining;
        remaining *= alphas[i];
    }
    p[0] = remaining;
    Ok(p)
}

/// Strictly lower-triangular gates `g_i^t` of a whole sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMatrix<T> {
    steps: usize,
    window: usize,
    g: Vec<T>,
}

impl<T: Real> GateMatrix<T> {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// `g_i^t`; zero outside the window and on or above the diagonal.
    pub fn get(&self, t: usize, i: usize) -> T {
        if i >= t || t >= self.steps {
            T::zero()
        } else {
            self.g[t * self.steps + i]
        }
    }

    /// `[g_0^t, …, g_{t-1}^t]`
    pub fn row(&self, t: usize) -> &[T] {
        &self.g[t * self.steps..t * self.steps + t]
    }
}

/// Builds gates from per-step alpha rows (`alphas[t]` has length `t`).
/// Entries for memory positions `i < t - window` are fixed at zero.
pub fn gates_from_alphas<T: Real>(alphas: &[Vec<T>], window: usize) -> Result<GateMatrix<T>> {
    let steps = alphas.len();
    let mut g = vec![T::zero(); steps * steps];
    for (t, row) in alphas.iter().enumerate() {
        if row.len() != t {
            return Err(Error::Length {
                what: "alpha row",
                expected: t,
                found: row.len(),
            });
        }
        let gates = gate_row(row)?;
        let lo = t.saturating_sub(window);
        for i in lo..t {
            g[t * steps + i] = gates[i];
        }
    }
    Ok(GateMatrix { steps, window, g })
}

/// Alpha rows from a distance profile, soft (`Some(τ)`) or hard (`None`).
pub fn alphas_from_distances<T: Real>(d: &[T], tau: Option<T>) -> Vec<Vec<T>> {
    (0..d.len())
        .map(|t| {
            (0..t)
                .map(|j| match tau {
                    Some(tau) => soft_alpha(d[t], d[j], tau),
                    None => hard_alpha(d[t], d[j]),
                })
                .collect()
        })
        .collect()
}

/// Parameter handles and hyperparameters of the parsing network.
#[derive(Clone, Debug)]
pub struct ParsingParams {
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub dist_weight: ParamId,
    pub dist_bias: ParamId,
    /// Look-back range `L`: distances see the current and `L` previous embeddings.
    pub look_back: usize,
    pub temperature: f64,
}

impl ParsingParams {
    /// Registers freshly initialised parsing parameters.
    pub fn init<T: Real, R: rand::Rng + ?Sized>(
        params: &mut ParamSet<T>,
        embedding: usize,
        hidden: usize,
        look_back: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Self {
        let fan = (look_back + 1) * embedding;
        ParsingParams {
            conv_weight: params.insert_uniform("parse.conv.weight", &[fan, hidden], fan, rng),
            conv_bias: params.insert("parse.conv.bias", Tensor::zeros([hidden])),
            norm_gain: params.insert("parse.norm.gain", Tensor::full([hidden], T::one())),
            norm_bias: params.insert("parse.norm.bias", Tensor::zeros([hidden])),
            dist_weight: params.insert_uniform("parse.dist.weight", &[hidden, 1], hidden, rng),
            dist_bias: params.insert("parse.dist.bias", Tensor::zeros([1])),
            look_back,
            temperature,
        }
    }

    /// Embeddings per distance: the current one and `L` before it.
    pub fn window(&self) -> usize {
        self.look_back + 1
    }

    /// Parameter handles in a fixed order, see [`ParsingParams::with_ids`].
    pub fn ids(&self) -> [ParamId; 6] {
        [self.conv_weight, self.conv_bias, self.norm_gain, self.norm_bias, self.dist_weight, self.dist_bias]
    }

    /// Same network reading its parameters from other handles.
    pub fn with_ids(&self, ids: [ParamId; 6]) -> Self {
        let [conv_weight, conv_bias, norm_gain, norm_bias, dist_weight, dist_bias] = ids;
        ParsingParams {
            conv_weight,
            conv_bias,
            norm_gain,
            norm_bias,
            dist_weight,
            dist_bias,
            ..*self
        }
    }

    /// Distance for one position from its `L + 1` window embeddings
    /// (each `[B, E]`, oldest first). Returns `[B, 1]`.
    pub fn distance<T: Real>(&self, graph: &mut Graph<T>, bound: &BoundParams, window: &[Var]) -> Result<Var> {
        if window.len() != self.window() {
            return Err(Error::Length {
                what: "distance window",
                expected: self.window(),
                found: window.len(),
            });
        }
        let stacked = graph.concat(window)?;
        let h = graph.matmul(stacked, bound.var(self.conv_weight))?;
        let h = graph.add(h, bound.var(self.conv_bias))?;
        let h = graph.layer_norm(h, bound.var(self.norm_gain), bound.var(self.norm_bias))?;
        let h = graph.relu(h)?;
        let d = graph.matmul(h, bound.var(self.dist_weight))?;
        let d = graph.add(d, bound.var(self.dist_bias))?;
        graph.relu(d)
    }

    /// Distances for every position of a sequence of `[B, E]` embeddings.
    /// `history` supplies up to `L-1` embeddings preceding the sequence;
    /// missing ones are zero vectors.
    pub fn distances<T: Real>(
        &self,
        graph: &mut Graph<T>,
        bound: &BoundParams,
        history: &[Var],
        embeddings: &[Var],
    ) -> Result<Vec<Var>> {
        let first = *embeddings.first().ok_or(Error::Empty("embedding sequence"))?;
        let shape = graph.value(first).shape().to_vec();
        let pad_needed = self.look_back.saturating_sub(history.len());
        let mut seq: Vec<Var> = Vec::with_capacity(self.look_back + embeddings.len());
        if pad_needed > 0 {
            let zero = graph.constant(Tensor::zeros(shape));
            seq.extend(core::iter::repeat_n(zero, pad_needed));
        }
        let keep = history.len().min(self.look_back);
        seq.extend_from_slice(&history[history.len() - keep..]);
        seq.extend_from_slice(embeddings);
        (0..embeddings.len())
            .map(|i| self.distance(graph, bound, &seq[i..i + self.window()]))
            .collect()
    }

    /// Soft alphas of a `[B, 1]` query distance against `[B, n]` earlier
    /// distances.
    pub fn alpha_row<T: Real>(&self, graph: &mut Graph<T>, query: Var, history: Var) -> Result<Var> {
        let diff = graph.sub(query, history)?;
        let scaled = graph.scale(diff, T::lit(self.temperature))?;
        let clipped = graph.hardtanh(scaled)?;
        let shifted = graph.shift(clipped, T::one())?;
        graph.scale(shifted, T::lit(0.5))
    }
}

/// Evaluates distances for one sequence of embedding vectors, without
/// recording gradients.
pub fn compute_distances<T: Real>(
    embeddings: &[Vec<T>],
    params: &ParamSet<T>,
    parsing: &ParsingParams,
) -> Result<DistanceProfile<T>> {
    if embeddings.is_empty() {
        return Err(Error::Empty("embedding sequence"));
    }
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let vars: Vec<Var> = embeddings
        .iter()
        .map(|e| {
            let t = Tensor::new([1, e.len()], e.clone())?;
            Ok(graph.constant(t))
        })
        .collect::<Result<_>>()?;
    let ds = parsing.distances(&mut graph, &bound, &[], &vars)?;
    DistanceProfile::new(ds.iter().map(|&v| graph.value(v).item()).collect())
}
