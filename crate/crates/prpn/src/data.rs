//! Vocabularies and token streams for character- and word-level corpora.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use prpn_core::model::TokenMode;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

/// Token ↔ id mapping in first-occurrence order.
///
/// Word vocabularies reserve id 0 for padding and id 1 for unknown words
/// and map each newline to [`EOS`]. Character vocabularies are a closed
/// alphabet with no reserved ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    mode: TokenMode,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(mode: TokenMode) -> Self {
        let mut v = Vocab {
            mode,
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        if mode == TokenMode::Word {
            v.add(PAD);
            v.add(UNK);
        }
        v
    }

    /// Vocabulary of everything in `text`.
    pub fn build(text: &str, mode: TokenMode) -> Self {
        let mut v = Vocab::new(mode);
        for tok in tokenize(text, mode) {
            v.add(tok);
        }
        v
    }

    pub fn from_tokens(mode: TokenMode, tokens: Vec<String>) -> Result<Self> {
        let mut v = Vocab {
            mode,
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in tokens {
            if v.index.contains_key(&t) {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
            v.add(&t);
        }
        if mode == TokenMode::Word && (v.tokens.first().map(String::as_str) != Some(PAD) || v.id(UNK) != Some(1)) {
            return Err(Error::Data("word vocabulary must start with <pad>, <unk>".into()));
        }
        Ok(v)
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk(&self) -> Option<usize> {
        match self.mode {
            TokenMode::Word => Some(1),
            TokenMode::Char => None,
        }
    }

    pub fn eos(&self) -> Option<usize> {
        match self.mode {
            TokenMode::Word => self.id(EOS),
            TokenMode::Char => self.id("\n"),
        }
    }

    /// Ids of `text`. Unseen words map to `<unk>`; an unseen character is
    /// an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text, self.mode).map(|t| self.lookup(t)).collect()
    }

    pub fn lookup(&self, token: &str) -> Result<usize> {
        match (self.id(token), self.unk()) {
            (Some(id), _) => Ok(id),
            (None, Some(unk)) => Ok(unk),
            (None, None) => Err(Error::Data(format!("character {token:?} is not in the training alphabet"))),
        }
    }

    /// Inverse of [`Vocab::encode`]: characters are concatenated, words
    /// joined by spaces with [`EOS`] rendered as a newline.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for (k, &id) in ids.iter().enumerate() {
            let tok = self.token(id).unwrap_or(UNK);
            match self.mode {
                TokenMode::Char => out.push_str(tok),
                TokenMode::Word if tok == EOS => out.push('\n'),
                TokenMode::Word => {
                    if k > 0 && !out.ends_with('\n') {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}

/// Splits text into tokens: one per character, or words separated by
/// spaces with each newline as [`EOS`].
pub fn tokenize(text: &str, mode: TokenMode) -> Box<dyn Iterator<Item = &str> + '_> {
    match mode {
        TokenMode::Char => Box::new(text.char_indices().map(move |(i, c)| &text[i..i + c.len_utf8()])),
        TokenMode::Word => Box::new(text.split_inclusive('\n').flat_map(|line| {
            let eos = line.ends_with('\n').then_some(EOS);
            line.trim_end_matches('\n').split(' ').filter(|w| !w.is_empty()).chain(eos)
        })),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Utf8 { path: path.into() })?;
    if text.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    Ok(text)
}

/// Token ids of a language-modelling corpus with the vocabulary built from it.
pub fn load_lm_corpus(path: &Path, mode: TokenMode) -> Result<(Vec<usize>, Vocab)> {
    let text = read_text(path)?;
    let vocab = Vocab::build(&text, mode);
    let ids = vocab.encode(&text)?;
    Ok((ids, vocab))
}

/// Encodes a further split with an existing vocabulary.
pub fn load_with_vocab(path: &Path, vocab: &Vocab) -> Result<Vec<usize>> {
    vocab.encode(&read_text(path)?)
}

/// One independent sentence per non-empty line, as word ids.
pub fn load_sentences(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(' ').filter(|w| !w.is_empty()).map(|w| vocab.lookup(w)).collect())
        .collect()
}
