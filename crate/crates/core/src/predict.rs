//! Predict network: estimates the next distance, attends over the top-layer
//! hidden tape under the resulting gates and maps `[summary; h_t]` to
//! next-token logits.

use alloc::vec::Vec;

use rand::Rng;

use crate::params::{BoundParams, ParamId, ParamSet};
use crate::parsing::ParsingParams;
use crate::reading::{scaled_scores, MemoryTapes};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Real, Result};

/// Two affine+ReLU layers wrapped by an identity skip.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Final projection to vocabulary logits.
#[derive(Clone, Debug)]
pub enum OutputLayer {
    Untied { weight: ParamId, bias: ParamId },
    /// Projects to embedding width, then scores against the input embedding table.
    Tied { proj_weight: ParamId, proj_bias: ParamId, bias: ParamId },
}

#[derive(Clone, Debug)]
pub struct PredictParams {
    pub next_dist_weight: ParamId,
    pub next_dist_bias: ParamId,
    pub query: ParamId,
    pub input_weight: ParamId,
    pub input_bias: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub blocks: Vec<ResidualBlock>,
    pub output: OutputLayer,
    pub hidden: usize,
}

/// Switches for one prediction.
#[derive(Clone, Copy, Debug)]
pub struct PredictConfig {
    /// When false the structured summary is replaced by zeros.
    pub attention: bool,
    pub output_dropout: f64,
}

impl PredictParams {
    pub fn init<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        hidden: usize,
        embedding: usize,
        vocab: usize,
        residual_blocks: usize,
        tied: bool,
        rng: &mut R,
    ) -> Self {
        let next_dist_weight = params.insert_uniform("predict.next_dist.weight", &[hidden, 1], hidden, rng);
        let next_dist_bias = params.insert("predict.next_dist.bias", Tensor::zeros([1]));
        let query = params.insert_uniform("predict.query", &[hidden, hidden], hidden, rng);
        let input_weight = params.insert_uniform("predict.input.weight", &[2 * hidden, hidden], 2 * hidden, rng);
        let input_bias = params.insert("predict.input.bias", Tensor::zeros([hidden]));
        let norm_gain = params.insert("predict.norm.gain", Tensor::full([hidden], T::one()));
        let norm_bias = params.insert("predict.norm.bias", Tensor::zeros([hidden]));
        let blocks = (0..residual_blocks)
            .map(|k| ResidualBlock {
                w1: params.insert_uniform(&alloc::format!("predict.block.{k}.w1"), &[hidden, hidden], hidden, rng),
                b1: params.insert(alloc::format!("predict.block.{k}.b1"), Tensor::zeros([hidden])),
                w2: params.insert_uniform(&alloc::format!("predict.block.{k}.w2"), &[hidden, hidden], hidden, rng),
                b2: params.insert(alloc::format!("predict.block.{k}.b2"), Tensor::zeros([hidden])),
            })
            .collect();
        let output = if tied {
            OutputLayer::Tied {
                proj_weight: params.insert_uniform("predict.proj.weight", &[hidden, embedding], hidden, rng),
                proj_bias: params.insert("predict.proj.bias", Tensor::zeros([embedding])),
                bias: params.insert("output.bias", Tensor::zeros([vocab])),
            }
        } else {
            OutputLayer::Untied {
                weight: params.insert_uniform("output.weight", &[hidden, vocab], hidden, rng),
                bias: params.insert("output.bias", Tensor::zeros([vocab])),
            }
        };
        PredictParams {
            next_dist_weight,
            next_dist_bias,
            query,
            input_weight,
            input_bias,
            norm_gain,
            norm_bias,
            blocks,
            output,
            hidden,
        }
    }
}

/// `d'_{t+1} = ReLU(W'_d h_t + b'_d)`, shape `[B, 1]`.
pub fn estimate_next_distance<T: Real>(
    graph: &mut Graph<T>,
    bound: &BoundParams,
    params: &PredictParams,
    h_t: Var,
) -> Result<Var> {
    let d = graph.matmul(h_t, bound.var(params.next_dist_weight))?;
    let d = graph.add(d, bound.var(params.next_dist_bias))?;
    graph.relu(d)
}

/// Next-step gates over `n` tape entries. `history` is `[B, n + 1]`: the
/// distances of the tape positions followed by the current distance `d_t`.
pub fn next_step_gates<T: Real>(
    graph: &mut Graph<T>,
    parsing: &ParsingParams,
    next_distance: Var,
    history: Var,
) -> Result<Var> {
    let cols = graph.value(history).cols();
    if cols < 2 {
        return Err(Error::Empty("next-step distance history"));
    }
    let alphas = parsing.alpha_row(graph, next_distance, history)?;
    let gates = graph.rev_cumprod(alphas)?;
    graph.slice(gates, 0, cols - 1)
}

/// Maps the top-layer state to vocabulary logits.
///
/// `tape` holds top-layer hiddens for positions before `t` and `gates` is the
/// matching `[B, n]` row of `g^{t+1}`. `embedding` is the input table, used
/// when the output layer is tied.
#[allow(clippy::too_many_arguments)]
pub fn predict_logits<T: Real, R: Rng + ?Sized>(
    graph: &mut Graph<T>,
    bound: &BoundParams,
    params: &PredictParams,
    tape: &MemoryTapes<Var>,
    h_t: Var,
    gates: Var,
    embedding: Var,
    config: PredictConfig,
    rng: Option<&mut R>,
) -> Result<Var> {
    if tape.is_empty() {
        return Err(Error::Empty("memory tape"));
    }
    let summary = if config.attention {
        let entries: Vec<Var> = tape.hidden().copied().collect();
        let mem = graph.stack(&entries)?;
        let key = graph.matmul(h_t, bound.var(params.query))?;
        let scores = scaled_scores(graph, mem, key, params.hidden)?;
        if graph.value(scores).shape() != graph.value(gates).shape() {
            return Err(Error::Shape {
                kernel: "predict gates",
                left: graph.value(scores).shape().to_vec(),
                right: graph.value(gates).shape().to_vec(),
            });
        }
        let weights = graph.weighted_norm(scores, gates)?;
        graph.batch_weighted_sum(weights, mem)?
    } else {
        let shape = graph.value(h_t).shape().to_vec();
        graph.constant(Tensor::zeros(shape))
    };
    feed_forward(graph, bound, params, summary, h_t, embedding, config.output_dropout, rng)
}

/// `f̂([summary; h_t])` followed by the output projection.
#[allow(clippy::too_many_arguments)]
pub fn feed_forward<T: Real, R: Rng + ?Sized>(
    graph: &mut Graph<T>,
    bound: &BoundParams,
    params: &PredictParams,
    summary: Var,
    h_t: Var,
    embedding: Var,
    output_dropout: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    let z = graph.concat(&[summary, h_t])?;
    let u = graph.matmul(z, bound.var(params.input_weight))?;
    let u = graph.add(u, bound.var(params.input_bias))?;
    let u = graph.layer_norm(u, bound.var(params.norm_gain), bound.var(params.norm_bias))?;
    let mut u = graph.relu(u)?;
    for block in &params.blocks {
        let r = graph.matmul(u, bound.var(block.w1))?;
        let r = graph.add(r, bound.var(block.b1))?;
        let r = graph.relu(r)?;
        let r = graph.matmul(r, bound.var(block.w2))?;
        let r = graph.add(r, bound.var(block.b2))?;
        let r = graph.relu(r)?;
        u = graph.add(u, r)?;
    }
    let u = graph.dropout(u, output_dropout, rng)?;
    match params.output {
        OutputLayer::Untied { weight, bias } => {
            let logits = graph.matmul(u, bound.var(weight))?;
            graph.add(logits, bound.var(bias))
        }
        OutputLayer::Tied {
            proj_weight,
            proj_bias,
            bias,
        } => {
            let y = graph.matmul(u, bound.var(proj_weight))?;
            let y = graph.add(y, bound.var(proj_bias))?;
            let logits = graph.matmul_bt(y, embedding)?;
            graph.add(logits, bound.var(bias))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(tied: bool) -> (ParamSet<f64>, PredictParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        // embedding table first so tied outputs can use it
        params.insert_uniform("embedding", &[5, 3], 3, &mut rng);
        let pp = PredictParams::init(&mut params, 4, 3, 5, 1, tied, &mut rng);
        (params, pp)
    }

    #[test]
    fn next_distance_is_clamped_affine() {
        let (mut params, pp) = setup(false);
        let h = [0.3, -0.8, 0.5, 0.1];
        let eval = |params: &ParamSet<f64>| {
            let mut graph = Graph::new();
            let bound = params.bind(&mut graph);
            let hv = graph.constant(Tensor::new([1, 4], h.to_vec()).unwrap());
            let d = estimate_next_distance(&mut graph, &bound, &pp, hv).unwrap();
            graph.value(d).item()
        };
        let w = params.by_name("predict.next_dist.weight").unwrap().data().to_vec();
        let expected = (h.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).max(0.0);
        assert!((eval(&params) - expected).abs() < 1e-12);

        params.set("predict.next_dist.weight", Tensor::zeros([4, 1])).unwrap();
        assert_eq!(eval(&params), 0.0);
        params.set("predict.next_dist.bias", Tensor::vector(vec![-2.0])).unwrap();
        assert_eq!(eval(&params), 0.0);
    }

    fn logits(params: &ParamSet<f64>, pp: &PredictParams, gate: f64, attention: bool) -> Vec<f64> {
        let mut graph = Graph::new();
        let bound = params.bind(&mut graph);
        let e0 = graph.constant(Tensor::new([1, 4], vec![0.9, -0.1, 0.4, 0.2]).unwrap());
        let e1 = graph.constant(Tensor::new([1, 4], vec![-0.5, 0.6, 0.3, -0.7]).unwrap());
        let mut tape = MemoryTapes::seeded(e0, e0, 4);
        tape.push(e1, e1);
        let h = graph.constant(Tensor::new([1, 4], vec![0.2, 0.1, -0.3, 0.5]).unwrap());
        let g = graph.constant(Tensor::full([1, 2], gate));
        let emb = bound.var(params.id("embedding").unwrap());
        let cfg = PredictConfig {
            attention,
            output_dropout: 0.0,
        };
        let l = predict_logits::<f64, ChaCha8Rng>(&mut graph, &bound, pp, &tape, h, g, emb, cfg, None).unwrap();
        graph.value(l).data().to_vec()
    }

    #[test]
    fn closed_gates_reduce_to_current_state() {
        for tied in [false, true] {
            let (params, pp) = setup(tied);
            assert_eq!(logits(&params, &pp, 0.0, true), logits(&params, &pp, 1.0, false));
            assert_ne!(logits(&params, &pp, 1.0, true), logits(&params, &pp, 1.0, false));
        }
    }

    #[test]
    fn softmax_of_logits_normalizes() {
        let (params, pp) = setup(true);
        let l = logits(&params, &pp, 0.7, true);
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
        let p: Vec<f64> = l.iter().map(|v| (v - m).exp() / z).collect();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_checked_two_word_vocab() {
        // f̂ collapsed to an identity-like map: input layer picks h_t, no
        // normalization effect, output is the identity on a 2-d state.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::<f64>::new();
        let emb = params.insert_uniform("embedding", &[2, 2], 2, &mut rng);
        let pp = PredictParams::init(&mut params, 2, 2, 2, 0, false, &mut rng);
        // z = [s0, s1, h0, h1]; u = z W_in with W_in = [[1,0],[0,1],[1,0],[0,1]] → s + h
        params
            .set("predict.input.weight", Tensor::new([4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        params
            .set("output.weight", Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let mut graph = Graph::new();
        let bound = params.bind(&mut graph);
        let summary = graph.constant(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap());
        let h = graph.constant(Tensor::new([1, 2], vec![2.0, 0.0]).unwrap());
        let l = feed_forward::<f64, ChaCha8Rng>(&mut graph, &bound, &pp, summary, h, bound.var(emb), 0.0, None).unwrap();
        // u = LN([3, 0]) = [1, -1] (up to the variance guard), relu → [~1, 0]
        let expected = 3.0 / (2.25f64 + 1e-5).sqrt() / 2.0;
        let out = graph.value(l).data();
        assert!((out[0] - expected).abs() < 1e-12);
        assert_eq!(out[1], 0.0);
    }
}
