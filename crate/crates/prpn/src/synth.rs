//! Synthetic nested-bracket corpus with known constituency.
//!
//! A constituent is an opening token, its children and the matching closing
//! token; a child is a filler token or a nested constituent. The
//! gold spans are the bracket pairs.

use prpn_core::tree::SpanSet;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::treebank::GoldTree;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Distinct bracket pairs.
    pub pairs: usize,
    pub fillers: usize,
    /// Nesting depth of the deepest constituent, top level counted as 1.
    pub max_depth: usize,
    pub min_children: usize,
    pub max_children: usize,
    /// Chance that a child below `max_depth` is a constituent.
    pub nest_prob: f64,
    /// Top-level constituents per sentence, drawn from 1..=max_top.
    pub max_top: usize,
    /// Longer draws are rejected.
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            pairs: 4,
            fillers: 0,
            max_depth: 4,
            min_children: 0,
            max_children: 2,
            nest_prob: 0.6,
            max_top: 2,
            max_len: 12,
        }
    }
}

impl SynthConfig {
    pub fn vocab_size(&self) -> usize {
        2 * self.pairs + self.fillers
    }

    fn open(&self, k: usize) -> String {
        char::from(b'a' + k as u8).to_string()
    }

    fn close(&self, k: usize) -> String {
        char::from(b'A' + k as u8).to_string()
    }

    fn filler(&self, k: usize) -> String {
        char::from(b'z' - k as u8).to_string()
    }

    /// Draws one sentence with its bracketed rendering.
    pub fn sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> (GoldTree, String) {
        loop {
            let s = self.draw(rng);
            if s.0.len() <= self.max_len {
                return s;
            }
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (GoldTree, String) {
        let mut tokens = Vec::new();
        let mut spans = SpanSet::default();
        let mut parts = Vec::new();
        for _ in 0..rng.random_range(1..=self.max_top) {
            parts.push(self.constituent(1, rng, &mut tokens, &mut spans));
        }
        spans.insert(0, tokens.len() - 1);
        let text = format!("(S {})", parts.join(" "));
        (GoldTree { tokens, spans }, text)
    }

    fn constituent<R: Rng + ?Sized>(&self, depth: usize, rng: &mut R, tokens: &mut Vec<String>, spans: &mut SpanSet) -> String {
        let k = rng.random_range(0..self.pairs);
        let start = tokens.len();
        tokens.push(self.open(k));
        let mut parts = vec![self.open(k)];
        for _ in 0..rng.random_range(self.min_children..=self.max_children) {
            if depth < self.max_depth && rng.random_bool(self.nest_prob) {
                parts.push(self.constituent(depth + 1, rng, tokens, spans));
            } else if self.fillers > 0 {
                let f = self.filler(rng.random_range(0..self.fillers));
                tokens.push(f.clone());
                parts.push(f);
            }
        }
        tokens.push(self.close(k));
        parts.push(self.close(k));
        spans.insert(start, tokens.len() - 1);
        format!("(P {})", parts.join(" "))
    }

    /// Sentences until at least `tokens` tokens are drawn.
    pub fn corpus<R: Rng + ?Sized>(&self, tokens: usize, rng: &mut R) -> Vec<(GoldTree, String)> {
        let mut out = Vec::new();
        let mut total = 0;
        while total < tokens {
            let s = self.sentence(rng);
            total += s.0.len();
            out.push(s);
        }
        out
    }
}

/// Word-mode training text: one sentence per line.
pub fn plain_text(sentences: &[(GoldTree, String)]) -> String {
    sentences.iter().map(|(g, _)| g.tokens.join(" ") + "\n").collect()
}

/// Treebank rendering: one bracketed tree per line.
pub fn bracketed_text(sentences: &[(GoldTree, String)]) -> String {
    sentences.iter().map(|(_, t)| t.clone() + "\n").collect()
}
