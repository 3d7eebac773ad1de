//! Binary trees decoded from distances, hard dependency ranges, and
//! unlabeled bracket scoring with trivial baselines.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BinaryTree {
    Leaf(usize),
    Node(Box<BinaryTree>, Box<BinaryTree>),
}

impl BinaryTree {
    pub fn node(left: BinaryTree, right: BinaryTree) -> Self {
        BinaryTree::Node(Box::new(left), Box::new(right))
    }

    /// Leaf indices in left-to-right order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self {
            BinaryTree::Leaf(i) => out.push(*i),
            BinaryTree::Node(l, r) => {
                l.collect_leaves(out);
                r.collect_leaves(out);
            }
        }
    }

    pub fn internal_nodes(&self) -> usize {
        match self {
            BinaryTree::Leaf(_) => 0,
            BinaryTree::Node(l, r) => 1 + l.internal_nodes() + r.internal_nodes(),
        }
    }

    /// Leaves are exactly `0..n` in order and there are `n - 1` internal nodes.
    pub fn is_valid(&self, n: usize) -> bool {
        self.leaves() == (0..n).collect::<Vec<_>>() && self.internal_nodes() + 1 == n
    }

    /// Inclusive span `(first leaf, last leaf)`.
    pub fn span(&self) -> (usize, usize) {
        match self {
            BinaryTree::Leaf(i) => (*i, *i),
            BinaryTree::Node(l, r) => (l.span().0, r.span().1),
        }
    }

    /// Spans of all internal nodes.
    pub fn spans(&self) -> SpanSet {
        let mut set = SpanSet::default();
        self.collect_spans(&mut set);
        set
    }

    fn collect_spans(&self, set: &mut SpanSet) -> (usize, usize) {
        match self {
            BinaryTree::Leaf(i) => (*i, *i),
            BinaryTree::Node(l, r) => {
                let (a, _) = l.collect_spans(set);
                let (_, b) = r.collect_spans(set);
                set.insert(a, b);
                (a, b)
            }
        }
    }

    /// Bracketed rendering such as `((a b) (c d))`.
    pub fn render<S: AsRef<str>>(&self, tokens: &[S]) -> String {
        let mut out = String::new();
        self.render_into(tokens, &mut out);
        out
    }

    fn render_into<S: AsRef<str>>(&self, tokens: &[S], out: &mut String) {
        match self {
            BinaryTree::Leaf(i) => out.push_str(tokens.get(*i).map_or("?", |s| s.as_ref())),
            BinaryTree::Node(l, r) => {
                out.push('(');
                l.render_into(tokens, out);
                out.push(' ');
                r.render_into(tokens, out);
                out.push(')');
            }
        }
    }
}

/// Inclusive `(start, end)` token spans.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanSet(BTreeSet<(usize, usize)>);

impl SpanSet {
    pub fn insert(&mut self, start: usize, end: usize) {
        self.0.insert((start.min(end), start.max(end)));
    }

    pub fn contains(&self, start: usize, end: usize) -> bool {
        self.0.contains(&(start, end))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().copied()
    }

    /// Drops spans that cannot be wrong for a length-`n` sentence: single
    /// tokens and the whole sentence.
    pub fn filtered(&self, n: usize) -> SpanSet {
        SpanSet(self.0.iter().copied().filter(|&(a, b)| b - a + 1 >= 2 && b - a + 1 < n).collect())
    }

    /// True when no two spans cross.
    pub fn is_nested(&self) -> bool {
        let spans: Vec<_> = self.iter().collect();
        spans.iter().enumerate().all(|(k, &(a, b))| {
            spans[k + 1..]
                .iter()
                .all(|&(c, d)| !((a < c && c <= b && b < d) || (c < a && a <= d && d < b)))
        })
    }

    pub fn intersection_len(&self, other: &SpanSet) -> usize {
        self.0.intersection(&other.0).count()
    }
}

impl FromIterator<(usize, usize)> for SpanSet {
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        let mut s = SpanSet::default();
        for (a, b) in iter {
            s.insert(a, b);
        }
        s
    }
}

/// Decodes `n` tokens from the `n - 1` distances between adjacent tokens
/// (`d[k]` separates tokens `k` and `k + 1`).
///
/// The largest distance at boundary `i` splits the range into
/// `((x_<i), (x_i, (x_>i)))`; ties go to the leftmost boundary.
pub fn distances_to_tree<T: PartialOrd + Copy>(n: usize, d: &[T]) -> Result<BinaryTree> {
    if n == 0 {
        return Err(Error::Empty("sentence"));
    }
    if d.len() + 1 != n {
        return Err(Error::Length {
            what: "internal distances",
            expected: n - 1,
            found: d.len(),
        });
    }
    Ok(split_tree(0, n - 1, &mut |lo, hi| {
        // token i has distance d[i - 1] to its left neighbour
        let mut best = lo + 1;
        for i in lo + 2..=hi {
            if d[i - 1] > d[best - 1] {
                best = i;
            }
        }
        best
    }))
}

fn split_tree(lo: usize, hi: usize, choose: &mut impl FnMut(usize, usize) -> usize) -> BinaryTree {
    if lo == hi {
        return BinaryTree::Leaf(lo);
    }
    let i = choose(lo, hi);
    let left = split_tree(lo, i - 1, choose);
    let right = if i == hi {
        BinaryTree::Leaf(i)
    } else {
        BinaryTree::node(BinaryTree::Leaf(i), split_tree(i + 1, hi, choose))
    };
    BinaryTree::node(left, right)
}

/// Half-open interval `[start, end)` of positions a token may attend to
/// through fully open hard gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyRange {
    pub start: usize,
    pub end: usize,
}

impl DependencyRange {
    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    /// Overlapping without either containing the other.
    pub fn partially_overlaps(&self, other: &DependencyRange) -> bool {
        if self.is_empty() || other.is_empty() {
            return false;
        }
        let (a, b) = if self.start <= other.start { (self, other) } else { (other, self) };
        a.start < b.start && b.start < a.end && a.end < b.end
    }
}

/// Range of token `t`: starts at the latest earlier position `j ≥ 1` with
/// `d_j ≥ d_t` (a tie blocks), or at 0 when there is none.
pub fn hard_range<T: PartialOrd + Copy>(d: &[T], t: usize) -> DependencyRange {
    let start = (1..t).rev().find(|&j| d[j] >= d[t]).unwrap_or(0);
    DependencyRange { start, end: t }
}

/// [`hard_range`] for every position of a distance profile.
pub fn hard_ranges<T: PartialOrd + Copy>(d: &[T]) -> Vec<DependencyRange> {
    (0..d.len()).map(|t| hard_range(d, t)).collect()
}

/// First pair of indices whose ranges partially overlap.
pub fn check_no_partial_overlap(ranges: &[DependencyRange]) -> Option<(usize, usize)> {
    for (i, a) in ranges.iter().enumerate() {
        for (j, b) in ranges.iter().enumerate().skip(i + 1) {
            if a.partially_overlaps(b) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Rebuilds the tree from hard ranges alone by recursively grouping tokens:
/// inside `[lo, hi]` the split token is the last `m` whose range reaches
/// back past `lo` (`start ≤ lo`), i.e. the largest distance in the group.
pub fn tree_from_ranges(ranges: &[DependencyRange]) -> Result<BinaryTree> {
    let n = ranges.len();
    if n == 0 {
        return Err(Error::Empty("sentence"));
    }
    Ok(split_tree(0, n - 1, &mut |lo, hi| {
        (lo + 1..=hi).rev().find(|&m| ranges[m].start <= lo).unwrap_or(lo + 1)
    }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Unlabeled precision, recall and F1 after dropping length-1 and
/// whole-sentence spans from both sides. Both sides empty scores 1.
pub fn unlabeled_f1(pred: &SpanSet, gold: &SpanSet, n: usize) -> F1Score {
    let (p, g) = (pred.filtered(n), gold.filtered(n));
    if p.is_empty() && g.is_empty() {
        return F1Score {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let hit = p.intersection_len(&g) as f64;
    let precision = if p.is_empty() { 0.0 } else { hit / p.len() as f64 };
    let recall = if g.is_empty() { 0.0 } else { hit / g.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1Score { precision, recall, f1 }
}

/// Scores over a corpus: `sentence` averages per-sentence scores, `corpus`
/// pools matched/proposed/gold counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusF1 {
    pub sentences: usize,
    pub sentence: F1Score,
    pub corpus: F1Score,
}

#[derive(Clone, Debug, Default)]
pub struct F1Accumulator {
    sentences: usize,
    sums: (f64, f64, f64),
    matched: usize,
    proposed: usize,
    gold: usize,
}

impl F1Accumulator {
    pub fn add(&mut self, pred: &SpanSet, gold: &SpanSet, n: usize) -> F1Score {
        let s = unlabeled_f1(pred, gold, n);
        let (p, g) = (pred.filtered(n), gold.filtered(n));
        self.sentences += 1;
        self.sums.0 += s.precision;
        self.sums.1 += s.recall;
        self.sums.2 += s.f1;
        self.matched += p.intersection_len(&g);
        self.proposed += p.len();
        self.gold += g.len();
        s
    }

    pub fn finish(&self) -> CorpusF1 {
        let k = self.sentences.max(1) as f64;
        let precision = ratio(self.matched, self.proposed);
        let recall = ratio(self.matched, self.gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        CorpusF1 {
            sentences: self.sentences,
            sentence: F1Score {
                precision: self.sums.0 / k,
                recall: self.sums.1 / k,
                f1: self.sums.2 / k,
            },
            corpus: F1Score { precision, recall, f1 },
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Random,
    Lbranch,
    Rbranch,
}

/// A trivial tree over `n ≥ 1` leaves. Random trees are uniform over all
/// binary trees with `n` leaves.
pub fn baseline_tree<R: Rng + ?Sized>(kind: Baseline, n: usize, rng: &mut R) -> Result<BinaryTree> {
    if n == 0 {
        return Err(Error::Empty("sentence"));
    }
    Ok(match kind {
        Baseline::Lbranch => (1..n).fold(BinaryTree::Leaf(0), |t, i| BinaryTree::node(t, BinaryTree::Leaf(i))),
        Baseline::Rbranch => (0..n - 1)
            .rev()
            .fold(BinaryTree::Leaf(n - 1), |t, i| BinaryTree::node(BinaryTree::Leaf(i), t)),
        Baseline::Random => {
            let log_catalan = log_catalan(n);
            random_tree(0, n, &log_catalan, rng)
        }
    })
}

/// `ln C_k` for `k < n`.
fn log_catalan(n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n.max(1)];
    for k in 1..c.len() {
        let k1 = (k - 1) as f64;
        c[k] = c[k - 1] + num_traits::Float::ln(2.0 * (2.0 * k1 + 1.0) / (k1 + 2.0));
    }
    c
}

/// Uniform tree over leaves `start..start + n`: the left subtree gets `k`
/// leaves with probability `C_{k-1} C_{n-k-1} / C_{n-1}`.
fn random_tree<R: Rng + ?Sized>(start: usize, n: usize, lc: &[f64], rng: &mut R) -> BinaryTree {
    if n == 1 {
        return BinaryTree::Leaf(start);
    }
    let total = lc[n - 1];
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k = n - 1;
    for cand in 1..n {
        acc += num_traits::Float::exp(lc[cand - 1] + lc[n - cand - 1] - total);
        if u < acc {
            k = cand;
            break;
        }
    }
    BinaryTree::node(random_tree(start, k, lc, rng), random_tree(start + k, n - k, lc, rng))
}

/// Some binary tree over `n` leaves that contains every span of the nested
/// set `gold`. Children of each gold constituent are joined right-branching.
pub fn binarize(gold: &SpanSet, n: usize) -> Result<BinaryTree> {
    if n == 0 {
        return Err(Error::Empty("sentence"));
    }
    if !gold.is_nested() {
        return Err(Error::Config(String::from("crossing gold spans")));
    }
    if let Some((_, b)) = gold.iter().find(|&(_, b)| b >= n) {
        return Err(Error::Length {
            what: "gold span end",
            expected: n,
            found: b + 1,
        });
    }
    Ok(binarize_range(gold, 0, n - 1))
}

fn binarize_range(gold: &SpanSet, lo: usize, hi: usize) -> BinaryTree {
    if lo == hi {
        return BinaryTree::Leaf(lo);
    }
    // maximal gold spans strictly inside [lo, hi], plus uncovered tokens
    let mut children = Vec::new();
    let mut i = lo;
    while i <= hi {
        let widest = gold
            .iter()
            .filter(|&(a, b)| a == i && b <= hi && (a, b) != (lo, hi))
            .map(|(_, b)| b)
            .max()
            .unwrap_or(i);
        children.push(binarize_range(gold, i, widest));
        i = widest + 1;
    }
    let last = children.pop().unwrap_or(BinaryTree::Leaf(hi));
    children.into_iter().rev().fold(last, |t, c| BinaryTree::node(c, t))
}

/// Best score any binary tree can reach against `gold`.
pub fn upper_bound_f1(gold: &SpanSet, n: usize) -> Result<F1Score> {
    Ok(unlabeled_f1(&binarize(gold, n)?.spans(), gold, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spans(s: &[(usize, usize)]) -> SpanSet {
        s.iter().copied().collect()
    }

    fn leaf(i: usize) -> BinaryTree {
        BinaryTree::Leaf(i)
    }

    #[test]
    fn decode_two_pairs() {
        let t = distances_to_tree(4, &[0.1, 0.9, 0.2]).unwrap();
        assert_eq!(t.render(&["a", "b", "c", "d"]), "((a b) (c d))");
        assert_eq!(t.spans(), spans(&[(0, 3), (0, 1), (2, 3)]));
    }

    #[test]
    fn decode_boundaries() {
        let t = distances_to_tree::<f64>(1, &[]).unwrap();
        assert_eq!(t, leaf(0));
        assert!(t.spans().is_empty());
        assert!(distances_to_tree(3, &[1.0]).is_err());
        assert!(distances_to_tree::<f64>(0, &[]).is_err());
    }

    #[test]
    fn decreasing_distances_branch_right() {
        let t = distances_to_tree(4, &[3.0, 2.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(t, baseline_tree(Baseline::Rbranch, 4, &mut rng).unwrap());
    }

    #[test]
    fn ties_split_leftmost() {
        let t = distances_to_tree(3, &[1.0, 1.0]).unwrap();
        assert_eq!(t, BinaryTree::node(leaf(0), BinaryTree::node(leaf(1), leaf(2))));
    }

    #[test]
    fn ranges_of_monotone_profiles() {
        let inc = hard_ranges(&[0.0, 1.0, 2.0, 3.0]);
        assert!(inc.iter().all(|r| r.start == 0));
        let dec = hard_ranges(&[9.0, 4.0, 3.0, 2.0, 1.0]);
        for (t, r) in dec.iter().enumerate().skip(2) {
            assert_eq!((r.start, r.end), (t - 1, t));
        }
    }

    #[test]
    fn range_stops_at_the_maximum() {
        // unique maximum at m = 2, later distances below d_5
        let d = [0.0, 1.0, 5.0, 0.5, 0.2, 2.0];
        assert_eq!(hard_range(&d, 5), DependencyRange { start: 2, end: 5 });
        // a tie blocks
        assert_eq!(hard_range(&[0.0, 2.0, 1.0, 2.0], 3).start, 1);
    }

    #[test]
    fn overlap_checks() {
        let a = DependencyRange { start: 2, end: 5 };
        let b = DependencyRange { start: 3, end: 7 };
        let c = DependencyRange { start: 3, end: 5 };
        assert_eq!(check_no_partial_overlap(&[a, b]), Some((0, 1)));
        assert_eq!(check_no_partial_overlap(&[a, c]), None);
    }

    #[test]
    fn ranges_rebuild_the_decoded_tree() {
        let d = [0.0, 0.3, 0.9, 0.1, 0.7, 0.2];
        let ranges = hard_ranges(&d);
        assert_eq!(tree_from_ranges(&ranges).unwrap(), distances_to_tree(6, &d[1..]).unwrap());
    }

    #[test]
    fn hand_counted_f1() {
        let s = unlabeled_f1(&spans(&[(0, 1), (1, 3)]), &spans(&[(0, 1), (2, 3)]), 4);
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        let same = spans(&[(0, 1), (2, 3), (0, 3)]);
        assert_eq!(unlabeled_f1(&same, &same, 4).f1, 1.0);
        let s = unlabeled_f1(&spans(&[(0, 3)]), &spans(&[(1, 2)]), 4);
        assert_eq!(s.f1, 0.0);
        assert_eq!(unlabeled_f1(&SpanSet::default(), &SpanSet::default(), 2).f1, 1.0);
    }

    #[test]
    fn baselines_on_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = baseline_tree(Baseline::Rbranch, 4, &mut rng).unwrap();
        assert_eq!(r.spans(), spans(&[(0, 3), (1, 3), (2, 3)]));
        let l = baseline_tree(Baseline::Lbranch, 4, &mut rng).unwrap();
        assert_eq!(l.spans(), spans(&[(0, 3), (0, 2), (0, 1)]));
        for n in 1..9 {
            assert!(baseline_tree(Baseline::Random, n, &mut rng).unwrap().is_valid(n));
        }
    }

    #[test]
    fn upper_bounds() {
        let binary = spans(&[(0, 3), (0, 1), (2, 3)]);
        assert_eq!(upper_bound_f1(&binary, 4).unwrap().f1, 1.0);
        // nothing left to match once the root is filtered out
        let flat = spans(&[(0, 3)]);
        assert_eq!(upper_bound_f1(&flat, 4).unwrap().f1, 0.0);
        let s = upper_bound_f1(&spans(&[(0, 3), (1, 3)]), 4).unwrap();
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn binarization_keeps_gold() {
        let gold = spans(&[(0, 6), (0, 2), (3, 6), (4, 6), (0, 0)]);
        let t = binarize(&gold, 7).unwrap();
        assert!(t.is_valid(7));
        for (a, b) in gold.iter().filter(|(a, b)| a != b) {
            assert!(t.spans().contains(a, b));
        }
        assert!(binarize(&spans(&[(0, 2), (1, 3)]), 4).is_err());
    }

    #[test]
    fn corpus_accumulator() {
        let mut acc = F1Accumulator::default();
        acc.add(&spans(&[(0, 1), (1, 3)]), &spans(&[(0, 1), (2, 3)]), 4);
        acc.add(&spans(&[(0, 1)]), &spans(&[(0, 1)]), 3);
        let r = acc.finish();
        assert_eq!(r.sentences, 2);
        assert_eq!(r.sentence.f1, 0.75);
        assert_eq!(r.corpus.precision, 2.0 / 3.0);
        assert_eq!(vec![r.corpus.recall], vec![2.0 / 3.0]);
    }
}
