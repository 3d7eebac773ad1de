//! Command-line subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use prpn_core::tree::SpanSet;
use prpn_core::Model;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{encode_split, Corpus};
use crate::data::{read_text, tokenize, Vocab};
use crate::error::{Error, Result};
use crate::parse::{encode_tokens, induce_trees, report, sentence_distances};
use crate::train::{evaluate, metric_name, metric_value, Trainer, LAST_CHECKPOINT};
use crate::treebank::{load_gold_trees, lowercase, parse_gold, parse_unlabeled_lines, wsj10_filter, GoldTree};

#[derive(Debug, Parser)]
#[command(name = "prpn", version, about = "Parsing-Reading-Predict Network language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a language model; writes checkpoints and metrics.jsonl.
    Train(TrainArgs),
    /// Print BPC (char) or perplexity (word) of a checkpoint on a text file.
    EvalLm(EvalLmArgs),
    /// Print the induced binary tree of each input line.
    Parse(ParseArgs),
    /// Unlabeled F1 against gold trees, with trivial baselines.
    EvalParse(EvalParseArgs),
    /// Print the syntactic distance of every token as TSV.
    InspectDistances(InspectArgs),
    /// Run the property oracles and print one JSON report per line.
    Suite(SuiteArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration.
    #[arg(long, required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    /// Dot-path override such as `trainer.lr=0.001`; repeatable.
    #[arg(long = "override", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--override trainer.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints and the metric log.
    #[arg(long, default_value = "runs/prpn")]
    pub out: PathBuf,
    /// Continue from `<out>/last.ckpt`; overrides then apply to the stored
    /// trainer settings.
    #[arg(long, conflicts_with_all = ["config", "seed"])]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalLmArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text to score; defaults to the test, then validation file of the
    /// stored run configuration.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Treat every line as an independent sentence.
    #[arg(long)]
    pub sentences: Option<bool>,
    /// Parallel streams for stream evaluation.
    #[arg(long)]
    pub streams: Option<usize>,
    #[arg(long)]
    pub bptt: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One sentence per line.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredFormat {
    /// Unlabeled brackets, one tree per line, as printed by `parse`.
    Unlabeled,
    /// Labeled treebank trees; punctuation and null elements are removed.
    Ptb,
}

#[derive(Debug, Args)]
pub struct EvalParseArgs {
    /// Gold treebank file.
    #[arg(long)]
    pub gold: PathBuf,
    /// Induce trees with this model.
    #[arg(long, required_unless_present = "pred", conflicts_with = "pred")]
    pub checkpoint: Option<PathBuf>,
    /// Score trees from a file instead.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "unlabeled")]
    pub pred_format: PredFormat,
    /// Keep only sentences of at most 10 tokens.
    #[arg(long)]
    pub wsj10: bool,
    /// Lowercase gold tokens before vocabulary lookup.
    #[arg(long)]
    pub lowercase: bool,
    /// Seed of the RANDOM baseline.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random trees drawn per sentence for the RANDOM baseline.
    #[arg(long, default_value_t = 1)]
    pub random_samples: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text whose lines are fed as independent sequences.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a, out),
        Command::EvalLm(a) => eval_lm(a, out),
        Command::Parse(a) => parse(a, out),
        Command::EvalParse(a) => eval_parse(a, out),
        Command::InspectDistances(a) => inspect(a, out),
        Command::Suite(a) => suite(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io("<stdout>", e))
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut trainer = if a.resume {
        let ck = Checkpoint::load(&a.out.join(LAST_CHECKPOINT))?;
        let run = ck.run.ok_or_else(|| Error::Checkpoint("no run configuration stored".into()))?;
        let corpus = Corpus::load(&run.data, run.model.mode)?;
        Trainer::resume(corpus, &a.out, &a.overrides)?
    } else {
        let mut overrides = a.overrides;
        if let Some(seed) = a.seed {
            overrides.push(format!("trainer.seed={seed}"));
        }
        let path = a.config.ok_or_else(|| Error::Config("--config is required".into()))?;
        let config = RunConfig::load(&path, &overrides)?;
        let corpus = Corpus::load(&config.data, config.model.mode)?;
        Trainer::new(config, corpus, &a.out)?
    };
    let summary = trainer.run()?;
    trainer.checkpoint().save(&a.out.join(LAST_CHECKPOINT))?;
    let name = metric_name(trainer.model.config().mode);
    let line = json!({
        "epochs": summary.epochs,
        "steps": summary.steps,
        "lr": summary.lr,
        (format!("train_{name}")): summary.train_metric,
        (format!("best_{name}")): summary.best_valid,
    });
    emit(out, &format!("{line}\n"))
}

/// Model and vocabulary stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(Model<f32>, Vocab, Option<RunConfig>)> {
    let ck = Checkpoint::load(path)?;
    let vocab = ck
        .vocab
        .ok_or_else(|| Error::Checkpoint(format!("{}: no vocabulary stored", path.display())))?;
    let model = Model::from_params(ck.config, ck.params)?;
    Ok((model, vocab, ck.run))
}

fn eval_lm(a: EvalLmArgs, out: &mut dyn Write) -> Result<()> {
    let (model, vocab, run) = load_model(&a.checkpoint)?;
    let data = match (a.data, &run) {
        (Some(p), _) => p,
        (None, Some(r)) => r
            .data
            .test
            .clone()
            .or_else(|| r.data.valid.clone())
            .ok_or_else(|| Error::Config("no --data given and no test or validation file stored".into()))?,
        (None, None) => return Err(Error::Config("--data is required".into())),
    };
    let sentences = a.sentences.or(run.as_ref().map(|r| r.data.sentences)).unwrap_or(false);
    let streams = a.streams.or(run.as_ref().map(|r| r.trainer.eval_batch_size)).unwrap_or(10);
    let bptt = a.bptt.or(run.as_ref().map(|r| r.trainer.bptt)).unwrap_or(100);
    let split = encode_split(&read_text(&data)?, &vocab, sentences)?;
    let nll = evaluate(&model, &split, streams, bptt, vocab.eos())?;
    let mode = model.config().mode;
    let line = json!({ (metric_name(mode)): metric_value(mode, nll) });
    emit(out, &format!("{line}\n"))
}

fn encode_lines(text: &str, vocab: &Vocab) -> Result<(Vec<Vec<String>>, Vec<Vec<usize>>)> {
    let tokens: Vec<Vec<String>> = text
        .lines()
        .map(|l| tokenize(l, vocab.mode()).map(str::to_string).collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .collect();
    let ids = tokens.iter().map(|t| encode_tokens(vocab, t)).collect::<Result<_>>()?;
    Ok((tokens, ids))
}

fn parse(a: ParseArgs, out: &mut dyn Write) -> Result<()> {
    let (model, vocab, _) = load_model(&a.checkpoint)?;
    let (tokens, ids) = encode_lines(&read_text(&a.input)?, &vocab)?;
    let trees = induce_trees(&model, &ids)?;
    let text: String = trees.iter().zip(&tokens).map(|(t, w)| t.render(w) + "\n").collect();
    emit(out, &text)
}

fn eval_parse(a: EvalParseArgs, out: &mut dyn Write) -> Result<()> {
    let mut gold = load_gold_trees(&a.gold)?;
    if a.lowercase {
        lowercase(&mut gold);
    }
    let pairs: Vec<(GoldTree, SpanSet)> = match (&a.checkpoint, &a.pred) {
        (Some(ck), _) => {
            let gold = if a.wsj10 { wsj10_filter(gold) } else { gold };
            let (model, vocab, _) = load_model(ck)?;
            let ids = gold
                .iter()
                .map(|g| encode_tokens(&vocab, &g.tokens))
                .collect::<Result<Vec<_>>>()?;
            let trees = induce_trees(&model, &ids)?;
            gold.into_iter().zip(trees.iter().map(|t| t.spans())).collect()
        }
        (None, Some(pred)) => {
            let text = read_text(pred)?;
            let pred = match a.pred_format {
                PredFormat::Unlabeled => parse_unlabeled_lines(&text)?,
                PredFormat::Ptb => parse_gold(&text)?,
            };
            if pred.len() != gold.len() {
                return Err(Error::Data(format!("{} predicted trees for {} gold trees", pred.len(), gold.len())));
            }
            let mut pairs = Vec::with_capacity(gold.len());
            for (i, (g, p)) in gold.into_iter().zip(pred).enumerate() {
                if p.len() != g.len() {
                    return Err(Error::Data(format!(
                        "sentence {}: {} predicted tokens, {} gold",
                        i + 1,
                        p.len(),
                        g.len()
                    )));
                }
                if !a.wsj10 || (1..=10).contains(&g.len()) {
                    pairs.push((g, p.spans));
                }
            }
            pairs
        }
        (None, None) => return Err(Error::Config("either --checkpoint or --pred is required".into())),
    };
    let (gold, pred): (Vec<GoldTree>, Vec<SpanSet>) = pairs.into_iter().unzip();
    let r = report(&pred, &gold, a.seed, a.random_samples)?;
    emit(out, &format!("{}\n", serde_json::to_string(&r)?))
}

fn escape(token: &str) -> String {
    token.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> Result<()> {
    let (model, vocab, _) = load_model(&a.checkpoint)?;
    let (tokens, ids) = encode_lines(&read_text(&a.input)?, &vocab)?;
    let profiles = sentence_distances(&model, &ids)?;
    let mut text = String::from("sentence\tindex\ttoken\tdistance\n");
    for (s, (words, d)) in tokens.iter().zip(&profiles).enumerate() {
        for (i, (w, x)) in words.iter().zip(d).enumerate() {
            text.push_str(&format!("{s}\t{i}\t{}\t{x}\n", escape(w)));
        }
    }
    emit(out, &text)
}

fn suite(a: SuiteArgs, out: &mut dyn Write) -> Result<()> {
    let reports = crate::suite::run_suite(a.seed, a.trials);
    emit(out, &crate::suite::to_json_lines(&reports)?)
}
