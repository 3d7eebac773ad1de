//! Tree induction from a trained model and unlabeled bracket scoring.

use prpn_core::tree::{
    baseline_tree, binarize, distances_to_tree, Baseline, BinaryTree, CorpusF1, F1Accumulator, SpanSet,
};
use prpn_core::Model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::treebank::GoldTree;

/// Sentences per distance batch.
const CHUNK: usize = 64;

/// Encodes tokens with the model vocabulary.
pub fn encode_tokens(vocab: &Vocab, tokens: &[String]) -> Result<Vec<usize>> {
    tokens.iter().map(|t| vocab.lookup(t)).collect()
}

/// Distance profiles of sentences, computed in padded batches.
pub fn sentence_distances(model: &Model<f32>, sentences: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
    let chunks: Vec<Result<Vec<Vec<f32>>>> = sentences
        .par_chunks(CHUNK)
        .map(|chunk| {
            let rows: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            Ok(model
                .sentence_distances(&rows)?
                .into_iter()
                .map(|d| d.into_vec())
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(sentences.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Binary trees decoded from the model's distances. The distance of the
/// first token (against padding) is not used.
pub fn induce_trees(model: &Model<f32>, sentences: &[Vec<usize>]) -> Result<Vec<BinaryTree>> {
    let profiles = sentence_distances(model, sentences)?;
    profiles
        .iter()
        .map(|d| Ok(distances_to_tree(d.len(), &d[1..])?))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    #[serde(rename = "RANDOM")]
    pub random: CorpusF1,
    #[serde(rename = "LBRANCH")]
    pub lbranch: CorpusF1,
    #[serde(rename = "RBRANCH")]
    pub rbranch: CorpusF1,
    #[serde(rename = "UPPER_BOUND")]
    pub upper_bound: CorpusF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub sentences: usize,
    /// Sentence-averaged scores.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Pooled over all spans of the corpus.
    pub corpus: prpn_core::tree::F1Score,
    pub baselines: Baselines,
}

/// Scores predicted span sets against gold trees.
pub fn score(pred: &[SpanSet], gold: &[GoldTree]) -> Result<CorpusF1> {
    if pred.len() != gold.len() {
        return Err(Error::Data(format!("{} predicted trees for {} gold trees", pred.len(), gold.len())));
    }
    let mut acc = F1Accumulator::default();
    for (p, g) in pred.iter().zip(gold) {
        acc.add(p, &g.spans, g.len());
    }
    Ok(acc.finish())
}

/// Trivial baselines on the gold sentences. RANDOM averages
/// `random_samples` independent draws per sentence.
pub fn baselines(gold: &[GoldTree], seed: u64, random_samples: usize) -> Result<Baselines> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fixed = |kind| -> Result<CorpusF1> {
        let pred: Vec<SpanSet> = gold
            .iter()
            .map(|g| Ok(baseline_tree(kind, g.len(), &mut rng)?.spans()))
            .collect::<Result<_>>()?;
        score(&pred, gold)
    };
    let lbranch = fixed(Baseline::Lbranch)?;
    let rbranch = fixed(Baseline::Rbranch)?;
    let mut acc = F1Accumulator::default();
    for _ in 0..random_samples.max(1) {
        for g in gold {
            acc.add(&baseline_tree(Baseline::Random, g.len(), &mut rng)?.spans(), &g.spans, g.len());
        }
    }
    let mut random = acc.finish();
    random.sentences = gold.len();
    let upper: Vec<SpanSet> = gold
        .iter()
        .map(|g| Ok(binarize(&g.spans, g.len())?.spans()))
        .collect::<Result<_>>()?;
    Ok(Baselines {
        random,
        lbranch,
        rbranch,
        upper_bound: score(&upper, gold)?,
    })
}

pub fn report(pred: &[SpanSet], gold: &[GoldTree], seed: u64, random_samples: usize) -> Result<ParseReport> {
    let s = score(pred, gold)?;
    Ok(ParseReport {
        sentences: s.sentences,
        precision: s.sentence.precision,
        recall: s.sentence.recall,
        f1: s.sentence.f1,
        corpus: s.corpus,
        baselines: baselines(gold, seed, random_samples)?,
    })
}
