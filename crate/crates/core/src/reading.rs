//! Reading network: memory tapes, gate-modulated attention over them and the
//! LSTM update that consumes the attention summary.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::Rng;

use crate::params::{BoundParams, ParamId, ParamSet};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Real, Result};

/// Sliding windows of past hidden states `H` and cell states `C`.
///
/// Entries are kept oldest first; appending at capacity drops the oldest
/// pair. `offset` is the absolute position of the oldest entry, with the
/// zero seed state at position `-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryTapes<E> {
    hidden: VecDeque<E>,
    cells: VecDeque<E>,
    capacity: usize,
    offset: i64,
}

impl<E: Clone> MemoryTapes<E> {
    /// Tapes holding the single seed entry at position `-1`.
    pub fn seeded(h: E, c: E, capacity: usize) -> Self {
        let mut tapes = MemoryTapes {
            hidden: VecDeque::with_capacity(capacity),
            cells: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            offset: -1,
        };
        tapes.hidden.push_back(h);
        tapes.cells.push_back(c);
        tapes
    }

    /// Tapes restored from stored entries.
    pub fn from_parts(hidden: Vec<E>, cells: Vec<E>, capacity: usize, offset: i64) -> Result<Self> {
        if hidden.len() != cells.len() || hidden.is_empty() || hidden.len() > capacity {
            return Err(Error::Length {
                what: "memory tape",
                expected: capacity,
                found: hidden.len(),
            });
        }
        Ok(MemoryTapes {
            hidden: hidden.into(),
            cells: cells.into(),
            capacity,
            offset,
        })
    }

    /// Appends `(h, c)`, evicting the oldest pair when full.
    pub fn push(&mut self, h: E, c: E) {
        if self.hidden.len() == self.capacity {
            self.hidden.pop_front();
            self.cells.pop_front();
            self.offset += 1;
        }
        self.hidden.push_back(h);
        self.cells.push_back(c);
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }

    pub fn hidden(&self) -> impl ExactSizeIterator<Item = &E> {
        self.hidden.iter()
    }

    pub fn cells(&self) -> impl ExactSizeIterator<Item = &E> {
        self.cells.iter()
    }

    pub fn last(&self) -> Option<(&E, &E)> {
        Some((self.hidden.back()?, self.cells.back()?))
    }

    pub fn map<F, U: Clone>(&self, mut f: F) -> MemoryTapes<U>
    where
        F: FnMut(&E) -> U,
    {
        MemoryTapes {
            hidden: self.hidden.iter().map(&mut f).collect(),
            cells: self.cells.iter().map(&mut f).collect(),
            capacity: self.capacity,
            offset: self.offset,
        }
    }
}

impl MemoryTapes<Var> {
    fn stacked(&self, graph: &mut Graph<impl Real>) -> Result<(Var, Var)> {
        let h: Vec<Var> = self.hidden.iter().copied().collect();
        let c: Vec<Var> = self.cells.iter().copied().collect();
        Ok((graph.stack(&h)?, graph.stack(&c)?))
    }
}

/// Parameters of one recurrent layer.
#[derive(Clone, Debug)]
pub struct ReadingLayer {
    pub query_hidden: ParamId,
    pub query_input: ParamId,
    pub cell_weight: ParamId,
    pub cell_bias: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub input_size: usize,
}

/// Parameters of the stacked reading layers.
#[derive(Clone, Debug)]
pub struct ReadingParams {
    pub layers: Vec<ReadingLayer>,
    pub hidden: usize,
}

/// Switches for one reading step.
#[derive(Clone, Copy, Debug)]
pub struct StepConfig {
    /// When false, layers read the most recent tape entry directly (plain LSTM).
    pub attention: bool,
    pub inter_layer_dropout: f64,
    pub recurrent_dropout: f64,
}

impl ReadingParams {
    pub fn init<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        input_size: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input_size } else { hidden };
                let name = |s: &str| alloc::format!("read.{l}.{s}");
                ReadingLayer {
                    query_hidden: params.insert_uniform(&name("query.hidden"), &[hidden, hidden], hidden, rng),
                    query_input: params.insert_uniform(&name("query.input"), &[inp, hidden], inp, rng),
                    cell_weight: params.insert_uniform(&name("cell.weight"), &[inp + hidden, 4 * hidden], inp + hidden, rng),
                    cell_bias: params.insert(name("cell.bias"), Tensor::zeros([4 * hidden])),
                    norm_gain: params.insert(name("norm.gain"), Tensor::full([4 * hidden], T::one())),
                    norm_bias: params.insert(name("norm.bias"), Tensor::zeros([4 * hidden])),
                    input_size: inp,
                }
            })
            .collect();
        ReadingParams { layers, hidden }
    }
}

/// Softmax of `⟨h_i, k⟩ / √δ` over tape entries, `k = W_h h_prev + W_x x`.
/// `mem` is the stacked hidden tape `[B, n, H]`; returns `[B, n]`.
pub fn attention_scores<T: Real>(
    graph: &mut Graph<T>,
    query_hidden: Var,
    query_input: Var,
    mem: Var,
    h_prev: Var,
    x: Var,
    hidden: usize,
) -> Result<Var> {
    let kh = graph.matmul(h_prev, query_hidden)?;
    let kx = graph.matmul(x, query_input)?;
    let key = graph.add(kh, kx)?;
    scaled_scores(graph, mem, key, hidden)
}

pub(crate) fn scaled_scores<T: Real>(graph: &mut Graph<T>, mem: Var, key: Var, hidden: usize) -> Result<Var> {
    let dots = graph.batch_dot(mem, key)?;
    let scaled = graph.scale(dots, T::one() / T::lit(hidden as f64).sqrt())?;
    graph.softmax(scaled)
}

/// `s_i = g_i s̃_i / Σ g` (guarded against an all-zero gate row).
pub fn structured_weights<T: Real>(graph: &mut Graph<T>, scores: Var, gates: Var) -> Result<Var> {
    graph.weighted_norm(scores, gates)
}

/// `(Σ s_i h_i, Σ s_i c_i)`
pub fn adaptive_summary<T: Real>(graph: &mut Graph<T>, weights: Var, mem_h: Var, mem_c: Var) -> Result<(Var, Var)> {
    Ok((graph.batch_weighted_sum(weights, mem_h)?, graph.batch_weighted_sum(weights, mem_c)?))
}

/// One LSTM update from layer input and the attention summary `(h̃, c̃)`,
/// with layer normalization over the stacked gate pre-activations.
pub fn lstm_cell<T: Real>(
    graph: &mut Graph<T>,
    bound: &BoundParams,
    layer: &ReadingLayer,
    hidden: usize,
    input: Var,
    h_sum: Var,
    c_sum: Var,
) -> Result<(Var, Var)> {
    let joined = graph.concat(&[input, h_sum])?;
    let pre = graph.matmul(joined, bound.var(layer.cell_weight))?;
    let pre = graph.add(pre, bound.var(layer.cell_bias))?;
    let pre = graph.layer_norm(pre, bound.var(layer.norm_gain), bound.var(layer.norm_bias))?;
    let i = graph.slice(pre, 0, hidden)?;
    let f = graph.slice(pre, hidden, hidden)?;
    let o = graph.slice(pre, 2 * hidden, hidden)?;
    let g = graph.slice(pre, 3 * hidden, hidden)?;
    let i = graph.sigmoid(i)?;
    let f = graph.sigmoid(f)?;
    let o = graph.sigmoid(o)?;
    let g = graph.tanh(g)?;
    let keep = graph.mul(f, c_sum)?;
    let write = graph.mul(i, g)?;
    let c = graph.add(keep, write)?;
    let tc = graph.tanh(c)?;
    let h = graph.mul(o, tc)?;
    Ok((h, c))
}

/// Runs every layer for one token and appends the new states to the tapes.
///
/// `gates` is a `[B, n]` row aligned with the tape entries (all layers share
/// it). Returns the new `(h, c)` of each layer.
pub fn reading_step<T: Real, R: Rng + ?Sized>(
    graph: &mut Graph<T>,
    bound: &BoundParams,
    params: &ReadingParams,
    x: Var,
    tapes: &mut [MemoryTapes<Var>],
    gates: Var,
    config: StepConfig,
    mut rng: Option<&mut R>,
) -> Result<Vec<(Var, Var)>> {
    if tapes.len() != params.layers.len() {
        return Err(Error::Length {
            what: "tapes per layer",
            expected: params.layers.len(),
            found: tapes.len(),
        });
    }
    let mut out = Vec::with_capacity(params.layers.len());
    let mut input = x;
    for (l, (layer, tape)) in params.layers.iter().zip(tapes.iter_mut()).enumerate() {
        if l > 0 {
            input = graph.dropout(input, config.inter_layer_dropout, rng.as_deref_mut())?;
        }
        let (&h_prev, &c_prev) = tape.last().ok_or(Error::Empty("memory tape"))?;
        let (h_sum, c_sum) = if config.attention {
            let (mem_h, mem_c) = tape.stacked(graph)?;
            let scores = attention_scores(
                graph,
                bound.var(layer.query_hidden),
                bound.var(layer.query_input),
                mem_h,
                h_prev,
                input,
                params.hidden,
            )?;
            if graph.value(scores).shape() != graph.value(gates).shape() {
                return Err(Error::Shape {
                    kernel: "reading gates",
                    left: graph.value(scores).shape().to_vec(),
                    right: graph.value(gates).shape().to_vec(),
                });
            }
            let weights = structured_weights(graph, scores, gates)?;
            adaptive_summary(graph, weights, mem_h, mem_c)?
        } else {
            (h_prev, c_prev)
        };
        let h_sum = graph.dropout(h_sum, config.recurrent_dropout, rng.as_deref_mut())?;
        let (h, c) = lstm_cell(graph, bound, layer, params.hidden, input, h_sum, c_sum)?;
        tape.push(h, c);
        out.push((h, c));
        input = h;
    }
    Ok(out)
}
