//! Training loop, evaluation and the metric log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use prpn_core::model::{ForwardOptions, TokenBatch, TokenMode};
use prpn_core::optim::{clip_gradients, Adam, PlateauSchedule};
use prpn_core::tensor::Reduction;
use prpn_core::Model;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingState};
use crate::config::{apply_override, RunConfig};
use crate::corpus::{sentence_batches, split_streams, stream_batches, Corpus, Split};
use crate::error::{Error, Result};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRIC_LOG: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub step: u64,
    pub split: String,
    pub metric_name: String,
    pub value: f64,
    pub lr: f64,
}

/// Bits per character for character models, perplexity for word models.
pub fn metric_name(mode: TokenMode) -> &'static str {
    match mode {
        TokenMode::Char => "bpc",
        TokenMode::Word => "ppl",
    }
}

/// Converts a mean negative log-likelihood in nats.
pub fn metric_value(mode: TokenMode, nll: f64) -> f64 {
    match mode {
        TokenMode::Char => nll / std::f64::consts::LN_2,
        TokenMode::Word => nll.exp(),
    }
}

/// Mean next-token NLL (nats) of `model` over `split`, in evaluation mode.
///
/// Streams are split `streams` ways and each stream is run on its own, so
/// the result does not depend on how work is spread over threads.
pub fn evaluate(model: &Model<f32>, split: &Split, streams: usize, bptt: usize, end: Option<usize>) -> Result<f64> {
    let opts = ForwardOptions {
        reduction: Reduction::Sum,
        ..Default::default()
    };
    let parts: Vec<Result<(f64, usize)>> = match split {
        Split::Stream(ids) => {
            let rows = split_streams(ids, streams.min(ids.len() / 2).max(1))?;
            rows.par_iter()
                .map(|row| {
                    let mut carry = model.zero_carry(1);
                    let (mut total, mut count) = (0.0, 0);
                    for batch in stream_batches(row, 1, bptt)? {
                        let pass = model.forward::<ChaCha8Rng>(&batch, &carry, None, opts)?;
                        total += f64::from(pass.loss());
                        count += pass.predictions;
                        carry = pass.carry;
                    }
                    Ok((total, count))
                })
                .collect()
        }
        Split::Sentences(sents) => sents
            .par_iter()
            .map(|s| {
                let batch = TokenBatch::padded(&[s.as_slice()], end)?;
                let pass = model.forward::<ChaCha8Rng>(&batch, &model.zero_carry(1), None, opts)?;
                Ok((f64::from(pass.loss()), pass.predictions))
            })
            .collect(),
    };
    let (mut total, mut count) = (0.0, 0);
    for p in parts {
        let (t, c) = p?;
        total += t;
        count += c;
    }
    if count == 0 {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub lr: f64,
    pub train_metric: f64,
    /// Best metric seen by the schedule: validation, else training.
    pub best_valid: Option<f64>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub corpus: Corpus,
    pub model: Model<f32>,
    adam: Adam<f32>,
    schedule: PlateauSchedule,
    lr: f64,
    epoch: usize,
    step: u64,
    rng: ChaCha8Rng,
    out_dir: PathBuf,
    log: BufWriter<File>,
}

impl Trainer {
    /// Fresh run: parameters initialised from the configured seed, which
    /// also drives dropout and batch order afterwards.
    pub fn new(mut config: RunConfig, corpus: Corpus, out_dir: &Path) -> Result<Self> {
        config.model.vocab_size = corpus.vocab.len();
        config.model.mode = corpus.vocab.mode();
        let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed);
        let model = Model::new(config.model.clone(), &mut rng)?;
        let adam = Adam::new(config.trainer.adam(), model.params());
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join(METRIC_LOG);
        let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(Trainer {
            schedule: config.trainer.schedule(),
            lr: config.trainer.lr,
            config,
            corpus,
            model,
            adam,
            epoch: 0,
            step: 0,
            rng,
            out_dir: out_dir.to_path_buf(),
            log: BufWriter::new(log),
        })
    }

    /// Continues from `out_dir/last.ckpt`, appending to the metric log.
    /// `overrides` apply to the stored trainer settings, e.g. more epochs.
    pub fn resume(corpus: Corpus, out_dir: &Path, overrides: &[String]) -> Result<Self> {
        let ck = Checkpoint::load(&out_dir.join(LAST_CHECKPOINT))?;
        let stored = ck.run.ok_or_else(|| Error::Checkpoint("no run configuration stored".into()))?;
        let mut value = serde_json::to_value(&stored)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config = RunConfig::from_value(value)?;
        if config.model != stored.model {
            return Err(Error::Config("model settings cannot change on resume".into()));
        }
        let state = ck.training.ok_or_else(|| Error::Checkpoint("no training state stored".into()))?;
        if ck.vocab.as_ref().map(|v| v.tokens()) != Some(corpus.vocab.tokens()) {
            return Err(Error::Checkpoint("corpus vocabulary differs from the checkpoint".into()));
        }
        let model = Model::from_params(ck.config, ck.params)?;
        let (m, v) = ck
            .moments
            .ok_or_else(|| Error::Checkpoint("no optimizer moments stored".into()))?;
        let mut adam = Adam::new(config.trainer.adam(), model.params());
        adam.step = state.adam_step;
        adam.m = m;
        adam.v = v;
        let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed);
        let pos: u128 = state
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad rng position".into()))?;
        rng.set_word_pos(pos);
        let log_path = out_dir.join(METRIC_LOG);
        let log = OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        Ok(Trainer {
            config,
            corpus,
            model,
            adam,
            schedule: state.schedule,
            lr: state.lr,
            epoch: state.epoch,
            step: state.step,
            rng,
            out_dir: out_dir.to_path_buf(),
            log: BufWriter::new(log),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn mode(&self) -> TokenMode {
        self.config.model.mode
    }

    fn record(&mut self, split: &str, metric: &str, value: f64) -> Result<()> {
        let rec = MetricRecord {
            epoch: self.epoch,
            step: self.step,
            split: split.into(),
            metric_name: metric.into(),
            value,
            lr: self.lr,
        };
        let path = self.out_dir.join(METRIC_LOG);
        serde_json::to_writer(&mut self.log, &rec)?;
        writeln!(self.log).map_err(|e| Error::io(&path, e))?;
        self.log.flush().map_err(|e| Error::io(&path, e))
    }

    fn batches(&mut self) -> Result<Vec<TokenBatch>> {
        let t = &self.config.trainer;
        match &self.corpus.train {
            Split::Stream(ids) => stream_batches(ids, t.batch_size, t.bptt),
            Split::Sentences(sents) => {
                let mut order: Vec<usize> = (0..sents.len()).collect();
                order.shuffle(&mut self.rng);
                sentence_batches(sents, &order, t.batch_size, self.corpus.vocab.eos())
            }
        }
    }

    /// One optimisation step; returns the summed NLL and prediction count.
    pub fn train_batch(&mut self, batch: &TokenBatch, carry: &prpn_core::CarryState<f32>) -> Result<(f64, usize, prpn_core::CarryState<f32>)> {
        let pass = self
            .model
            .forward(batch, carry, Some(&mut self.rng), ForwardOptions::default())?;
        let mean = f64::from(pass.loss());
        let count = pass.predictions;
        let next = pass.carry.clone();
        let mut grads = pass.gradients(self.model.params())?;
        clip_gradients(&mut grads, self.config.trainer.clip_norm);
        self.adam.config.lr = self.lr;
        self.adam.step(self.model.params_mut(), &grads)?;
        self.step += 1;
        if let Some(every) = self.config.trainer.log_every {
            if every > 0 && self.step % every == 0 {
                let name = metric_name(self.mode());
                self.record("train_step", name, metric_value(self.mode(), mean))?;
            }
        }
        Ok((mean * count as f64, count, next))
    }

    /// Trains one epoch and returns its training metric.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let batches = self.batches()?;
        let cap = self.config.trainer.max_steps_per_epoch.unwrap_or(usize::MAX);
        let stream = matches!(self.corpus.train, Split::Stream(_));
        let mut carry = self.model.zero_carry(batches[0].batch());
        let (mut total, mut count) = (0.0, 0);
        for batch in batches.iter().take(cap) {
            if !stream || carry.batch() != batch.batch() {
                carry = self.model.zero_carry(batch.batch());
            }
            let (t, c, next) = self.train_batch(batch, &carry)?;
            total += t;
            count += c;
            carry = next;
        }
        Ok(metric_value(self.mode(), total / count.max(1) as f64))
    }

    pub fn evaluate_split(&self, split: &Split) -> Result<f64> {
        let t = &self.config.trainer;
        let nll = evaluate(&self.model, split, t.eval_batch_size, t.bptt, self.corpus.vocab.eos())?;
        Ok(metric_value(self.mode(), nll))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            params: self.model.params().clone(),
            vocab: Some(self.corpus.vocab.clone()),
            run: Some(self.config.clone()),
            training: Some(TrainingState {
                epoch: self.epoch,
                step: self.step,
                lr: self.lr,
                schedule: self.schedule,
                adam_step: self.adam.step,
                rng_word_pos: self.rng.get_word_pos().to_string(),
            }),
            moments: Some((self.adam.m.clone(), self.adam.v.clone())),
        }
    }

    /// Runs the remaining epochs. Each epoch ends with a validation pass, a
    /// schedule update and checkpoints.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let name = metric_name(self.mode());
        let mut train_metric = f64::NAN;
        while self.epoch < self.config.trainer.epochs {
            train_metric = self.train_epoch()?;
            self.epoch += 1;
            self.record("train", name, train_metric)?;
            // without a validation split the schedule follows the training metric
            let (split, valid) = match self.corpus.valid.clone() {
                Some(split) => {
                    let v = self.evaluate_split(&split)?;
                    self.record("valid", name, v)?;
                    ("valid", v)
                }
                None => ("train", train_metric),
            };
            let improved = self.schedule.best.is_none_or(|b| valid < b);
            self.lr = self.schedule.observe(valid, self.lr);
            if let Some(best) = self.schedule.best {
                self.record(split, &format!("best_{name}"), best)?;
            }
            let ck = self.checkpoint();
            if improved {
                ck.save(&self.out_dir.join(BEST_CHECKPOINT))?;
            }
            ck.save(&self.out_dir.join(LAST_CHECKPOINT))?;
        }
        Ok(TrainSummary {
            epochs: self.epoch,
            steps: self.step,
            lr: self.lr,
            train_metric,
            best_valid: self.schedule.best,
        })
    }
}

pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}
