//! Training and evaluation splits and their batching.

use prpn_core::model::{TokenBatch, TokenMode};

use crate::config::DataConfig;
use crate::data::{read_text, tokenize, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Split {
    /// One continuous token stream.
    Stream(Vec<usize>),
    /// Independent sentences.
    Sentences(Vec<Vec<usize>>),
}

impl Split {
    pub fn tokens(&self) -> usize {
        match self {
            Split::Stream(s) => s.len(),
            Split::Sentences(s) => s.iter().map(Vec::len).sum(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Split,
    pub valid: Option<Split>,
    pub test: Option<Split>,
}

impl Corpus {
    /// Builds the vocabulary from the training text and encodes every split.
    pub fn load(data: &DataConfig, mode: TokenMode) -> Result<Self> {
        let text = read_text(&data.train)?;
        let vocab = Vocab::build(&text, mode);
        let train = encode_split(&text, &vocab, data.sentences)?;
        let other = |p: &Option<std::path::PathBuf>| -> Result<Option<Split>> {
            p.as_ref()
                .map(|p| encode_split(&read_text(p)?, &vocab, data.sentences))
                .transpose()
        };
        let (valid, test) = (other(&data.valid)?, other(&data.test)?);
        Ok(Corpus {
            vocab,
            train,
            valid,
            test,
        })
    }

    /// Corpus over in-memory text, mainly for tests and synthetic data.
    pub fn from_text(train: &str, valid: Option<&str>, mode: TokenMode, sentences: bool) -> Result<Self> {
        let vocab = Vocab::build(train, mode);
        Ok(Corpus {
            train: encode_split(train, &vocab, sentences)?,
            valid: valid.map(|v| encode_split(v, &vocab, sentences)).transpose()?,
            test: None,
            vocab,
        })
    }
}

pub fn encode_split(text: &str, vocab: &Vocab, sentences: bool) -> Result<Split> {
    if !sentences {
        return Ok(Split::Stream(vocab.encode(text)?));
    }
    let sents: Vec<Vec<usize>> = text
        .lines()
        .map(|line| tokenize(line, vocab.mode()).map(|t| vocab.lookup(t)).collect::<Result<Vec<_>>>())
        .filter(|s| !matches!(s, Ok(v) if v.is_empty()))
        .collect::<Result<_>>()?;
    if sents.is_empty() {
        return Err(Error::Data("no sentences".into()));
    }
    Ok(Split::Sentences(sents))
}

/// `streams` contiguous streams of equal length; leftover tokens at the end
/// are dropped.
pub fn split_streams(ids: &[usize], streams: usize) -> Result<Vec<&[usize]>> {
    let len = ids.len() / streams.max(1);
    if len < 2 {
        return Err(Error::Data(format!(
            "{} tokens are too few for {streams} streams with at least one prediction each",
            ids.len()
        )));
    }
    Ok((0..streams).map(|b| &ids[b * len..(b + 1) * len]).collect())
}

/// Windows of `bptt` inputs (plus the following target) stepping through
/// the streams; the final window may be shorter.
pub fn stream_batches(ids: &[usize], streams: usize, bptt: usize) -> Result<Vec<TokenBatch>> {
    let rows = split_streams(ids, streams)?;
    let len = rows[0].len();
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < len {
        let end = (start + bptt + 1).min(len);
        let window: Vec<&[usize]> = rows.iter().map(|r| &r[start..end]).collect();
        out.push(TokenBatch::from_windows(&window)?);
        start = end - 1;
    }
    Ok(out)
}

/// Padded sentence batches in the given order; each sentence ends by
/// predicting `end`.
pub fn sentence_batches(sentences: &[Vec<usize>], order: &[usize], batch: usize, end: Option<usize>) -> Result<Vec<TokenBatch>> {
    order
        .chunks(batch.max(1))
        .map(|chunk| {
            let rows: Vec<&[usize]> = chunk.iter().map(|&i| sentences[i].as_slice()).collect();
            Ok(TokenBatch::padded(&rows, end)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_drop_the_remainder() {
        let ids: Vec<usize> = (0..11).collect();
        let s = split_streams(&ids, 3).unwrap();
        assert_eq!(s, [&[0, 1, 2][..], &[3, 4, 5], &[6, 7, 8]]);
        assert!(split_streams(&ids, 6).is_err());
    }

    #[test]
    fn windows_overlap_by_one_token() {
        let ids: Vec<usize> = (0..20).collect();
        let b = stream_batches(&ids, 2, 4).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b[0].inputs(), &[0, 1, 2, 3, 10, 11, 12, 13]);
        assert_eq!(b[1].inputs()[0], 4);
        assert_eq!(b[2].steps(), 1);
        assert_eq!(b[2].targets(), &[Some(9), Some(19)]);
    }

    #[test]
    fn sentences_split_on_lines() {
        let c = Corpus::from_text("a b\n\nc a b\n", None, TokenMode::Word, true).unwrap();
        match &c.train {
            Split::Sentences(s) => assert_eq!(s.len(), 2),
            _ => panic!(),
        }
        assert!(c.vocab.eos().is_some());
    }
}
