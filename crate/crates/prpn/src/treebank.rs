//! Bracketed treebank reading, punctuation stripping and the WSJ10 filter.

use std::path::Path;

use prpn_core::tree::SpanSet;

use crate::data::read_text;
use crate::error::{Error, Result};

/// POS tags removed before evaluation, besides `-NONE-`.
pub const PUNCTUATION_TAGS: [&str; 9] = [".", ",", ":", "``", "''", "-LRB-", "-RRB-", "#", "$"];
pub const NULL_TAG: &str = "-NONE-";

/// A parsed bracket tree; `label` is empty when absent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Node {
    Leaf(String),
    Inner { label: String, children: Vec<Node> },
}

/// Unlabeled gold tree: tokens plus the span of every constituent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldTree {
    pub tokens: Vec<String>,
    pub spans: SpanSet,
}

impl GoldTree {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BracketStyle {
    /// `(LABEL child ...)`: the first atom after `(` is a label.
    Labeled,
    /// `(child child ...)`: every atom is a leaf.
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn lex(text: &str) -> Vec<(Tok<'_>, usize)> {
    let mut out = Vec::new();
    let mut line = 1;
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let boundary = c == '(' || c == ')' || c.is_whitespace();
        if boundary {
            if let Some(s) = start.take() {
                out.push((Tok::Atom(&text[s..i]), line));
            }
            match c {
                '(' => out.push((Tok::Open, line)),
                ')' => out.push((Tok::Close, line)),
                '\n' => line += 1,
                _ => {}
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((Tok::Atom(&text[s..]), line));
    }
    out
}

/// Parses every top-level bracket tree in `text`.
pub fn parse_trees(text: &str, style: BracketStyle) -> Result<Vec<Node>> {
    let toks = lex(text);
    let mut pos = 0;
    let mut trees = Vec::new();
    while pos < toks.len() {
        match toks[pos] {
            (Tok::Open, _) => trees.push(parse_node(&toks, &mut pos, style)?),
            (Tok::Close, line) => {
                return Err(Error::Treebank {
                    line,
                    message: "unbalanced ')'".into(),
                })
            }
            (Tok::Atom(a), line) => {
                return Err(Error::Treebank {
                    line,
                    message: format!("token {a:?} outside any bracket"),
                })
            }
        }
    }
    Ok(trees)
}

fn parse_node(toks: &[(Tok<'_>, usize)], pos: &mut usize, style: BracketStyle) -> Result<Node> {
    let open_line = toks[*pos].1;
    *pos += 1;
    let mut label = String::new();
    if style == BracketStyle::Labeled {
        if let Some((Tok::Atom(a), _)) = toks.get(*pos) {
            label = a.to_string();
            *pos += 1;
        }
    }
    let mut children = Vec::new();
    loop {
        match toks.get(*pos) {
            None => {
                return Err(Error::Treebank {
                    line: open_line,
                    message: "unbalanced '('".into(),
                })
            }
            Some((Tok::Close, _)) => {
                *pos += 1;
                break;
            }
            Some((Tok::Open, _)) => children.push(parse_node(toks, pos, style)?),
            Some((Tok::Atom(a), _)) => {
                children.push(Node::Leaf(a.to_string()));
                *pos += 1;
            }
        }
    }
    if children.is_empty() {
        return Err(Error::Treebank {
            line: open_line,
            message: "empty constituent".into(),
        });
    }
    Ok(Node::Inner { label, children })
}

fn is_removed_tag(label: &str) -> bool {
    label == NULL_TAG || PUNCTUATION_TAGS.contains(&label)
}

/// Drops punctuation and null-element preterminals, then any constituent
/// left without children. `None` when nothing remains.
pub fn strip(node: &Node) -> Option<Node> {
    match node {
        Node::Leaf(w) => Some(Node::Leaf(w.clone())),
        Node::Inner { label, children } => {
            let preterminal = matches!(children.as_slice(), [Node::Leaf(_)]);
            if preterminal && is_removed_tag(label) {
                return None;
            }
            let kept: Vec<Node> = children.iter().filter_map(strip).collect();
            (!kept.is_empty()).then(|| Node::Inner {
                label: label.clone(),
                children: kept,
            })
        }
    }
}

/// Tokens and constituent spans of a tree, labels discarded.
pub fn gold_tree(node: &Node) -> GoldTree {
    fn walk(n: &Node, tokens: &mut Vec<String>, spans: &mut SpanSet) {
        match n {
            Node::Leaf(w) => tokens.push(w.clone()),
            Node::Inner { children, .. } => {
                let start = tokens.len();
                for c in children {
                    walk(c, tokens, spans);
                }
                spans.insert(start, tokens.len() - 1);
            }
        }
    }
    let mut tokens = Vec::new();
    let mut spans = SpanSet::default();
    walk(node, &mut tokens, &mut spans);
    GoldTree { tokens, spans }
}

/// Gold trees of a treebank text with punctuation and null elements removed.
/// Trees that become empty are skipped.
pub fn parse_gold(text: &str) -> Result<Vec<GoldTree>> {
    let trees = parse_trees(text, BracketStyle::Labeled)?;
    let gold: Vec<GoldTree> = trees.iter().filter_map(strip).map(|t| gold_tree(&t)).collect();
    if let Some(bad) = gold.iter().position(|g| !g.spans.is_nested()) {
        return Err(Error::Data(format!("gold tree {bad} has crossing spans")));
    }
    Ok(gold)
}

/// Unlabeled trees, one per non-empty line, as written by `parse`. A line
/// holding a single bare token is a one-word sentence.
pub fn parse_unlabeled_lines(text: &str) -> Result<Vec<GoldTree>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let at = |e: Error| match e {
            Error::Treebank { message, .. } => Error::Treebank { line: i + 1, message },
            other => other,
        };
        if !line.starts_with('(') {
            if line.split_whitespace().count() != 1 {
                return Err(Error::Treebank {
                    line: i + 1,
                    message: "expected a bracketed tree".into(),
                });
            }
            let mut spans = SpanSet::default();
            spans.insert(0, 0);
            out.push(GoldTree {
                tokens: vec![line.to_string()],
                spans,
            });
            continue;
        }
        let trees = parse_trees(line, BracketStyle::Unlabeled).map_err(at)?;
        if trees.len() != 1 {
            return Err(Error::Treebank {
                line: i + 1,
                message: format!("{} trees on one line", trees.len()),
            });
        }
        out.push(gold_tree(&trees[0]));
    }
    Ok(out)
}

pub fn load_gold_trees(path: &Path) -> Result<Vec<GoldTree>> {
    let gold = parse_gold(&read_text(path)?)?;
    if gold.is_empty() {
        return Err(Error::Data(format!("{}: no trees", path.display())));
    }
    Ok(gold)
}

/// Keeps sentences of 1 to 10 tokens.
pub fn wsj10_filter(trees: Vec<GoldTree>) -> Vec<GoldTree> {
    trees.into_iter().filter(|t| (1..=10).contains(&t.len())).collect()
}

pub fn lowercase(trees: &mut [GoldTree]) {
    for t in trees {
        for w in &mut t.tokens {
            *w = w.to_lowercase();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans(s: &[(usize, usize)]) -> SpanSet {
        s.iter().copied().collect()
    }

    #[test]
    fn hand_parse() {
        let g = parse_gold("(S (NP a) (VP b c))").unwrap();
        assert_eq!(g[0].tokens, ["a", "b", "c"]);
        assert_eq!(g[0].spans, spans(&[(0, 2), (0, 0), (1, 2)]));
    }

    #[test]
    fn punctuation_removed() {
        let g = parse_gold("(S (NP a (. .)) (VP b))").unwrap();
        assert_eq!(g[0].tokens, ["a", "b"]);
        assert_eq!(g[0].spans, spans(&[(0, 1), (0, 0), (1, 1)]));
    }

    #[test]
    fn ptb_style_with_nulls() {
        let text = "( (S (NP-SBJ (-NONE- *-1)) (VP (VBD ran) (, ,) (ADVP (RB fast))) (. .)) )\n\
                    ( (S (`` ``) (NP (DT the) (NN cat)) ('' '')) )";
        let g = parse_gold(text).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].tokens, ["ran", "fast"]);
        assert!(g[0].spans.contains(0, 1));
        assert_eq!(g[1].tokens, ["the", "cat"]);
    }

    #[test]
    fn malformed_input() {
        assert!(parse_gold("((a)").is_err());
        assert!(parse_gold("(S a))").is_err());
        assert!(parse_gold("()").is_err());
        assert!(parse_gold("a (S b)").is_err());
    }

    #[test]
    fn unlabeled_style() {
        let t = parse_trees("((a b) (c d))", BracketStyle::Unlabeled).unwrap();
        let g = gold_tree(&t[0]);
        assert_eq!(g.tokens, ["a", "b", "c", "d"]);
        assert_eq!(g.spans, spans(&[(0, 3), (0, 1), (2, 3)]));
    }

    #[test]
    fn wsj10_boundaries() {
        let tree = |n: usize| GoldTree {
            tokens: vec!["w".into(); n],
            spans: spans(&[(0, n - 1)]),
        };
        let kept = wsj10_filter(vec![tree(10), tree(11), tree(1)]);
        assert_eq!(kept.iter().map(GoldTree::len).collect::<Vec<_>>(), [10, 1]);
    }
}
