//! The assembled language model: embedding, parsing network, stacked
//! reading layers and predict network, with state carried across windows.

use alloc::collections::VecDeque;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{BoundParams, ParamId, ParamSet};
use crate::parsing::{DistanceProfile, ParsingParams};
use crate::predict::{self, PredictConfig, PredictParams};
use crate::reading::{self, MemoryTapes, ReadingParams, StepConfig};
use crate::tensor::{Graph, Reduction, Tensor, Var};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    Char,
    Word,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    /// Input embeddings and the predict network output.
    pub embedding: f64,
    pub inter_layer: f64,
    pub recurrent: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// All gates fixed at 1 and no distances computed.
    pub disable_parsing: bool,
    /// Reading layers consume the latest tape entry, as a plain LSTM.
    pub disable_reading_attention: bool,
    /// The predict network sees `h_t` only.
    pub disable_predict_attention: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: TokenMode,
    /// Filled from the training vocabulary when left at 0.
    #[serde(default)]
    pub vocab_size: usize,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub layers: usize,
    pub look_back: usize,
    pub temperature: f64,
    pub memory_span: usize,
    pub residual_blocks: usize,
    pub dropout: DropoutConfig,
    pub tie_embeddings: bool,
    #[serde(default)]
    pub ablations: Ablations,
}

impl ModelConfig {
    /// A small character-level configuration.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            mode: TokenMode::Char,
            vocab_size,
            embedding_size: 8,
            hidden_size: 16,
            layers: 2,
            look_back: 3,
            temperature: 10.0,
            memory_span: 6,
            residual_blocks: 1,
            dropout: DropoutConfig {
                embedding: 0.0,
                inter_layer: 0.0,
                recurrent: 0.0,
            },
            tie_embeddings: false,
            ablations: Ablations::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("embedding_size", self.embedding_size),
            ("hidden_size", self.hidden_size),
            ("layers", self.layers),
            ("look_back", self.look_back),
            ("memory_span", self.memory_span),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(alloc::format!("model.{name} must be positive")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("model.temperature must be positive".to_string()));
        }
        let d = self.dropout;
        for (name, p) in [("embedding", d.embedding), ("inter_layer", d.inter_layer), ("recurrent", d.recurrent)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(alloc::format!("model.dropout.{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Parameter handles of every component.
#[derive(Clone, Debug)]
pub struct Layout {
    pub embedding: ParamId,
    pub parsing: ParsingParams,
    pub reading: ReadingParams,
    pub predict: PredictParams,
}

impl Layout {
    fn init<T: Real, R: Rng + ?Sized>(config: &ModelConfig, params: &mut ParamSet<T>, rng: &mut R) -> Self {
        let (v, e, h) = (config.vocab_size, config.embedding_size, config.hidden_size);
        let embedding = params.insert_uniform("embedding", &[v, e], e, rng);
        let parsing = ParsingParams::init(params, e, h, config.look_back, config.temperature, rng);
        let reading = ReadingParams::init(params, e, h, config.layers, rng);
        let predict = PredictParams::init(params, h, e, v, config.residual_blocks, config.tie_embeddings, rng);
        Layout {
            embedding,
            parsing,
            reading,
            predict,
        }
    }
}

/// Next-token prediction problems for `batch` rows of `steps` positions.
///
/// Layout is row-major: entry `b * steps + t`. A `None` target is excluded
/// from the loss (padding).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    batch: usize,
    steps: usize,
    inputs: Vec<usize>,
    targets: Vec<Option<usize>>,
}

impl TokenBatch {
    pub fn new(batch: usize, steps: usize, inputs: Vec<usize>, targets: Vec<Option<usize>>) -> Result<Self> {
        if batch == 0 || steps == 0 {
            return Err(Error::Empty("token batch"));
        }
        for (what, len) in [("batch inputs", inputs.len()), ("batch targets", targets.len())] {
            if len != batch * steps {
                return Err(Error::Length {
                    what,
                    expected: batch * steps,
                    found: len,
                });
            }
        }
        Ok(TokenBatch {
            batch,
            steps,
            inputs,
            targets,
        })
    }

    /// Rows of a continuous stream: each row holds `steps + 1` tokens, the
    /// inputs are the first `steps` and the targets the last `steps`.
    pub fn from_windows(rows: &[&[usize]]) -> Result<Self> {
        let len = rows.first().ok_or(Error::Empty("token batch"))?.len();
        if len < 2 {
            return Err(Error::Empty("token window"));
        }
        let steps = len - 1;
        let mut inputs = Vec::with_capacity(rows.len() * steps);
        let mut targets = Vec::with_capacity(rows.len() * steps);
        for row in rows {
            if row.len() != len {
                return Err(Error::Length {
                    what: "token window",
                    expected: len,
                    found: row.len(),
                });
            }
            inputs.extend_from_slice(&row[..steps]);
            targets.extend(row[1..].iter().map(|&t| Some(t)));
        }
        TokenBatch::new(rows.len(), steps, inputs, targets)
    }

    /// Independent sentences padded with id 0. Each sentence predicts its own
    /// next tokens, then `end` (when given) after its last token.
    pub fn padded(sentences: &[&[usize]], end: Option<usize>) -> Result<Self> {
        let steps = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
        if sentences.is_empty() || steps == 0 {
            return Err(Error::Empty("sentence batch"));
        }
        let mut inputs = vec![0; sentences.len() * steps];
        let mut targets = vec![None; sentences.len() * steps];
        for (b, s) in sentences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Empty("sentence"));
            }
            let row = b * steps;
            inputs[row..row + s.len()].copy_from_slice(s);
            for t in 0..s.len() - 1 {
                targets[row + t] = Some(s[t + 1]);
            }
            targets[row + s.len() - 1] = end;
        }
        TokenBatch::new(sentences.len(), steps, inputs, targets)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Option<usize>] {
        &self.targets
    }

    /// Number of unmasked targets.
    pub fn predictions(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    fn column<U: Copy>(data: &[U], batch: usize, steps: usize, t: usize) -> Vec<U> {
        (0..batch).map(|b| data[b * steps + t]).collect()
    }
}

/// Detached recurrent state handed from one window to the next.
///
/// Tape entries are `[B, H]`; `distances` holds one `[B, 1]` tensor per tape
/// position and `embeddings` the last `L` input embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CarryState<T> {
    pub tapes: Vec<MemoryTapes<Tensor<T>>>,
    pub distances: VecDeque<Tensor<T>>,
    pub embeddings: Vec<Tensor<T>>,
}

impl<T: Real> CarryState<T> {
    /// Zero state: every tape holds a single zero entry at position `-1`.
    pub fn zeros(config: &ModelConfig, batch: usize) -> Self {
        let h = Tensor::zeros([batch, config.hidden_size]);
        let tapes = (0..config.layers)
            .map(|_| MemoryTapes::seeded(h.clone(), h.clone(), config.memory_span))
            .collect();
        CarryState {
            tapes,
            distances: VecDeque::from(vec![Tensor::zeros([batch, 1])]),
            embeddings: vec![Tensor::zeros([batch, config.embedding_size]); config.look_back],
        }
    }

    pub fn batch(&self) -> usize {
        self.distances.front().map_or(0, |d| d.rows())
    }

    /// Absolute position of the oldest retained entry.
    pub fn offset(&self) -> i64 {
        self.tapes.first().map_or(-1, |t| t.offset())
    }
}

/// Switches for a forward pass that do not belong to the model.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub reduction: Reduction,
    /// Computes distances as usual but replaces every gate by 1.
    pub open_gates: bool,
    /// Keeps the per-layer `(h, c)` values of every step in the diagnostics.
    pub record_states: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            reduction: Reduction::Mean,
            open_gates: false,
            record_states: false,
        }
    }
}

/// Per-step values observed during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Diagnostics<T> {
    /// Distances, row-major `[B, T]`; empty when parsing is disabled.
    pub distances: Vec<T>,
    /// Mean reading-gate value of each step.
    pub gate_openness: Vec<T>,
    /// `states[t][l] = (h, c)` when recording was requested.
    pub states: Vec<Vec<(Tensor<T>, Tensor<T>)>>,
}

/// A finished forward pass, holding the graph until gradients are taken.
pub struct ForwardPass<T: Real> {
    graph: Graph<T>,
    bound: BoundParams,
    loss: Var,
    pub predictions: usize,
    pub carry: CarryState<T>,
    pub diagnostics: Diagnostics<T>,
}

impl<T: Real> ForwardPass<T> {
    pub fn loss(&self) -> T {
        self.graph.value(self.loss).item()
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    /// Gradients for every parameter, in parameter-set order.
    pub fn gradients(mut self, params: &ParamSet<T>) -> Result<Vec<Tensor<T>>> {
        let mut grads = self.graph.backward(self.loss)?;
        Ok(self.bound.gradients(&mut grads, params))
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let layout = Layout::init(&config, &mut params, rng);
        // Small output weights keep initial predictions close to uniform.
        if let predict::OutputLayer::Untied { weight, .. } = layout.predict.output {
            for v in params.get_mut(weight).data_mut() {
                *v *= T::lit(0.1);
            }
        }
        Ok(Model { config, params, layout })
    }

    /// Rebuilds a model around stored parameters; names and shapes must
    /// match the layout implied by `config`.
    pub fn from_params(config: ModelConfig, stored: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let mut fresh = ParamSet::new();
        let layout = Layout::init(&config, &mut fresh, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        if fresh.len() != stored.len() {
            return Err(Error::Length {
                what: "parameter count",
                expected: fresh.len(),
                found: stored.len(),
            });
        }
        for (name, t) in fresh.iter() {
            let s = stored
                .by_name(name)
                .ok_or_else(|| Error::Config(alloc::format!("missing parameter {name}")))?;
            if s.shape() != t.shape() {
                return Err(Error::Shape {
                    kernel: "stored parameter",
                    left: t.shape().to_vec(),
                    right: s.shape().to_vec(),
                });
            }
        }
        let names: Vec<_> = fresh.iter().map(|(n, _)| alloc::string::String::from(n)).collect();
        for name in names {
            fresh.set(&name, stored.by_name(&name).cloned().ok_or_else(|| Error::Config(alloc::format!("missing parameter {name}")))?)?;
        }
        Ok(Model {
            config,
            params: fresh,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn zero_carry(&self, batch: usize) -> CarryState<T> {
        CarryState::zeros(&self.config, batch)
    }

    /// Runs the model over `batch`, starting from `carry`.
    ///
    /// With an RNG the pass is in training mode (dropout active); without one
    /// it is deterministic evaluation. The returned carry is detached.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &TokenBatch,
        carry: &CarryState<T>,
        mut rng: Option<&mut R>,
        options: ForwardOptions,
    ) -> Result<ForwardPass<T>> {
        let cfg = &self.config;
        let (b, steps) = (batch.batch, batch.steps);
        if carry.batch() != b || carry.tapes.len() != cfg.layers {
            return Err(Error::Length {
                what: "carried batch",
                expected: b,
                found: carry.batch(),
            });
        }
        if let Some(&id) = batch.inputs.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let parsing = !cfg.ablations.disable_parsing;
        let gated = parsing && !options.open_gates;
        let step_cfg = StepConfig {
            attention: !cfg.ablations.disable_reading_attention,
            inter_layer_dropout: cfg.dropout.inter_layer,
            recurrent_dropout: cfg.dropout.recurrent,
        };
        let predict_cfg = PredictConfig {
            attention: !cfg.ablations.disable_predict_attention,
            output_dropout: cfg.dropout.embedding,
        };

        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph);
        let table = bound.var(self.layout.embedding);
        let mut tapes: Vec<MemoryTapes<Var>> = carry
            .tapes
            .iter()
            .map(|t| t.map(|x| graph.constant(x.clone())))
            .collect();
        let mut dist_hist: VecDeque<Var> = carry.distances.iter().map(|d| graph.constant(d.clone())).collect();
        let mut window: VecDeque<Var> = carry.embeddings.iter().map(|e| graph.constant(e.clone())).collect();
        let capacity = cfg.memory_span;

        let mut diagnostics = Diagnostics {
            distances: if parsing { vec![T::zero(); b * steps] } else { Vec::new() },
            gate_openness: Vec::with_capacity(steps),
            states: Vec::new(),
        };
        let mut losses = Vec::with_capacity(steps);

        for t in 0..steps {
            let ids = TokenBatch::column(&batch.inputs, b, steps, t);
            let targets = TokenBatch::column(&batch.targets, b, steps, t);
            let emb = graph.gather(table, &ids)?;
            let emb = graph.dropout(emb, cfg.dropout.embedding, rng.as_deref_mut())?;

            let n = dist_hist.len();
            let d_t = if parsing {
                window.push_back(emb);
                let win: Vec<Var> = window.iter().copied().collect();
                window.pop_front();
                let d = self.layout.parsing.distance(&mut graph, &bound, &win)?;
                for (r, &v) in graph.value(d).data().iter().enumerate() {
                    diagnostics.distances[r * steps + t] = v;
                }
                Some(d)
            } else {
                window.push_back(emb);
                window.pop_front();
                None
            };

            let history = match (gated, d_t) {
                (true, Some(_)) => {
                    let hist: Vec<Var> = dist_hist.iter().copied().collect();
                    Some(graph.concat(&hist)?)
                }
                _ => None,
            };
            let gates = match (history, d_t) {
                (Some(h), Some(d)) => {
                    let alphas = self.layout.parsing.alpha_row(&mut graph, d, h)?;
                    graph.rev_cumprod(alphas)?
                }
                _ => graph.constant(Tensor::full([b, n], T::one())),
            };
            let gv = graph.value(gates).data();
            diagnostics
                .gate_openness
                .push(gv.iter().copied().sum::<T>() / T::lit(gv.len() as f64));

            let top_before = tapes.last().ok_or(Error::Empty("reading layers"))?.clone();
            let states = reading::reading_step(
                &mut graph,
                &bound,
                &self.layout.reading,
                emb,
                &mut tapes,
                gates,
                step_cfg,
                rng.as_deref_mut(),
            )?;
            if options.record_states {
                diagnostics.states.push(
                    states
                        .iter()
                        .map(|&(h, c)| (graph.value(h).clone(), graph.value(c).clone()))
                        .collect(),
                );
            }
            let h_t = states.last().ok_or(Error::Empty("reading layers"))?.0;

            let next_gates = match (history, d_t) {
                (Some(h), Some(d)) => {
                    let d_next = predict::estimate_next_distance(&mut graph, &bound, &self.layout.predict, h_t)?;
                    let full = graph.concat(&[h, d])?;
                    predict::next_step_gates(&mut graph, &self.layout.parsing, d_next, full)?
                }
                _ => graph.constant(Tensor::full([b, top_before.len()], T::one())),
            };
            let logits = predict::predict_logits(
                &mut graph,
                &bound,
                &self.layout.predict,
                &top_before,
                h_t,
                next_gates,
                table,
                predict_cfg,
                rng.as_deref_mut(),
            )?;
            if targets.iter().any(Option::is_some) {
                losses.push(graph.cross_entropy(logits, &targets, Reduction::Sum)?);
            }

            let d_store = match d_t {
                Some(d) => d,
                None => graph.constant(Tensor::zeros([b, 1])),
            };
            if dist_hist.len() == capacity {
                dist_hist.pop_front();
            }
            dist_hist.push_back(d_store);
        }

        let predictions = batch.predictions();
        let loss = match losses.split_first() {
            None => return Err(Error::Empty("unmasked targets")),
            Some((&first, rest)) => {
                let mut total = first;
                for &l in rest {
                    total = graph.add(total, l)?;
                }
                match options.reduction {
                    Reduction::Sum => total,
                    Reduction::Mean => graph.scale(total, T::one() / T::lit(predictions as f64))?,
                }
            }
        };

        let new_carry = CarryState {
            tapes: tapes.iter().map(|tape| tape.map(|&v| graph.value(v).clone())).collect(),
            distances: dist_hist.iter().map(|&v| graph.value(v).clone()).collect(),
            embeddings: window.iter().map(|&v| graph.value(v).clone()).collect(),
        };
        Ok(ForwardPass {
            graph,
            bound,
            loss,
            predictions,
            carry: new_carry,
            diagnostics,
        })
    }

    /// Distances of independent sentences, computed together as one batch
    /// padded with id 0 and then cut back to each sentence's length.
    pub fn sentence_distances(&self, sentences: &[&[usize]]) -> Result<Vec<DistanceProfile<T>>> {
        if self.config.ablations.disable_parsing {
            return Err(Error::Config("parsing network is disabled".to_string()));
        }
        let steps = sentences.iter().map(|s| s.len()).max().ok_or(Error::Empty("sentence batch"))?;
        if sentences.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("sentence"));
        }
        if let Some(&id) = sentences.iter().flat_map(|s| s.iter()).find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        let b = sentences.len();
        let mut graph = Graph::new();
        let mut frozen = ParamSet::new();
        // only the embedding table and parsing network are needed
        let lp = &self.layout.parsing;
        let embedding = frozen.insert(self.params.name(self.layout.embedding), self.params.get(self.layout.embedding).clone());
        let local = lp
            .ids()
            .map(|id| frozen.insert(self.params.name(id), self.params.get(id).clone()));
        let graph_params = lp.with_ids(local);
        let bound = frozen.bind(&mut graph);
        let embs: Vec<Var> = (0..steps)
            .map(|t| {
                let col: Vec<usize> = sentences.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
                graph.gather(bound.var(embedding), &col)
            })
            .collect::<Result<_>>()?;
        let ds = graph_params.distances(&mut graph, &bound, &[], &embs)?;
        (0..b)
            .map(|r| {
                let d = (0..sentences[r].len()).map(|t| graph.value(ds[t]).data()[r]).collect();
                DistanceProfile::new(d)
            })
            .collect()
    }

    /// Distances of one sentence from a fresh zero state.
    pub fn sentence_forward(&self, sentence: &[usize]) -> Result<DistanceProfile<T>> {
        self.sentence_distances(&[sentence])?.pop().ok_or(Error::Empty("sentence"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(config: ModelConfig) -> Model<f64> {
        Model::new(config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn batch() -> TokenBatch {
        TokenBatch::from_windows(&[&[0, 3, 1, 2, 4, 1], &[2, 2, 0, 4, 3, 3]]).unwrap()
    }

    fn eval(m: &Model<f64>, b: &TokenBatch, carry: &CarryState<f64>, opts: ForwardOptions) -> ForwardPass<f64> {
        m.forward::<ChaCha8Rng>(b, carry, None, opts).unwrap()
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let m = model(ModelConfig::tiny(5));
        let pass = eval(&m, &batch(), &m.zero_carry(2), ForwardOptions::default());
        let uniform = (5.0f64).ln();
        assert!((pass.loss() - uniform).abs() / uniform < 0.05, "{}", pass.loss());
        assert_eq!(pass.predictions, 10);
        assert_eq!(pass.diagnostics.distances.len(), 10);
        assert!(pass.diagnostics.distances.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let m = model(ModelConfig::tiny(5));
        let b = TokenBatch::from_windows(&[&[0, 7, 1]]).unwrap();
        let err = m.forward::<ChaCha8Rng>(&b, &m.zero_carry(1), None, ForwardOptions::default());
        assert!(matches!(err, Err(Error::TokenOutOfRange { id: 7, .. })));
        assert!(TokenBatch::from_windows(&[&[0]]).is_err());
    }

    #[test]
    fn disabled_parsing_matches_open_gates() {
        let mut cfg = ModelConfig::tiny(5);
        let open = model(cfg.clone());
        let a = eval(
            &open,
            &batch(),
            &open.zero_carry(2),
            ForwardOptions {
                open_gates: true,
                ..Default::default()
            },
        );
        cfg.ablations.disable_parsing = true;
        let mut off = model(cfg);
        *off.params_mut() = open.params().clone();
        let b = eval(&off, &batch(), &off.zero_carry(2), ForwardOptions::default());
        assert_eq!(a.loss().to_bits(), b.loss().to_bits());
        assert!(b.diagnostics.gate_openness.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn carry_splits_agree_with_single_pass() {
        let mut cfg = ModelConfig::tiny(5);
        cfg.memory_span = 12;
        let m = model(cfg);
        let seq = [0, 3, 1, 2, 4, 1, 1, 0, 2, 3, 4, 2, 0];
        let sum = ForwardOptions {
            reduction: Reduction::Sum,
            ..Default::default()
        };
        let whole = eval(&m, &TokenBatch::from_windows(&[&seq]).unwrap(), &m.zero_carry(1), sum);
        let first = eval(&m, &TokenBatch::from_windows(&[&seq[..7]]).unwrap(), &m.zero_carry(1), sum);
        let second = eval(&m, &TokenBatch::from_windows(&[&seq[6..]]).unwrap(), &first.carry, sum);
        let split = first.loss() + second.loss();
        assert!((whole.loss() - split).abs() < 1e-10 * whole.loss());
    }

    #[test]
    fn padded_distances_match_single_sentences() {
        let m = model(ModelConfig::tiny(5));
        let sents: [&[usize]; 3] = [&[1, 2, 3, 4], &[4], &[2, 2, 1]];
        let batched = m.sentence_distances(&sents).unwrap();
        for (s, d) in sents.iter().zip(&batched) {
            let single = m.sentence_forward(s).unwrap();
            assert_eq!(single.as_slice(), d.as_slice());
            assert_eq!(d.len(), s.len());
        }
    }

    #[test]
    fn forward_distances_match_sentence_distances() {
        let m = model(ModelConfig::tiny(5));
        let pass = eval(&m, &batch(), &m.zero_carry(2), ForwardOptions::default());
        let d = m.sentence_forward(&[0, 3, 1, 2, 4]).unwrap();
        assert_eq!(&pass.diagnostics.distances[..5], d.as_slice());
    }

    #[test]
    fn padded_batch_masks_targets() {
        let b = TokenBatch::padded(&[&[3, 4, 1], &[2]], Some(1)).unwrap();
        assert_eq!(b.inputs(), &[3, 4, 1, 2, 0, 0]);
        assert_eq!(b.targets(), &[Some(4), Some(1), Some(1), Some(1), None, None]);
    }

    #[test]
    fn stored_params_round_trip() {
        let m = model(ModelConfig::tiny(5));
        let rebuilt = Model::from_params(m.config().clone(), m.params().clone()).unwrap();
        assert_eq!(rebuilt.params().tensors(), m.params().tensors());
        let mut bigger = m.config().clone();
        bigger.hidden_size += 1;
        assert!(Model::from_params(bigger, m.params().clone()).is_err());
    }
}
