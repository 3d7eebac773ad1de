//! Randomized checks of the gating and tree identities.
//!
//! Every property draws its inputs from an RNG seeded by the suite seed and
//! the property name, so a failing trial can be replayed on its own.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::parsing::{gate_row, hard_alpha, soft_alpha, structure_probs};
use crate::tree::{
    baseline_tree, check_no_partial_overlap, distances_to_tree, hard_ranges, tree_from_ranges,
    unlabeled_f1, Baseline, SpanSet,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub property: String,
    pub trials: usize,
    pub failures: usize,
    /// Trial index and inputs of the first failure.
    pub first_counterexample: Option<Counterexample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub trial: usize,
    pub input: String,
}

type Check = fn(&mut ChaCha8Rng) -> Result<(), String>;

/// Properties with their cost class: quadratic ones run a tenth of the trials.
const PROPERTIES: &[(&str, Check, bool)] = [
    ("stick_breaking_sums_to_one", sums_to_one as Check, false),
    ("stick_breaking_cdf_is_gate", cdf_is_gate, false),
    ("gates_monotone", gates_monotone, false),
    ("sharp_soft_gates_are_hard", sharp_gates, false),
    ("hard_ranges_never_partially_overlap", no_partial_overlap, true),
    ("decoded_tree_is_valid", decoded_tree_valid, true),
    ("decoder_matches_hard_ranges", decoder_matches_ranges, true),
    ("f1_swap_symmetry", f1_symmetry, false),
    ("rbranch_self_f1", rbranch_self, false),
]
.as_slice();

pub fn property_names() -> impl Iterator<Item = &'static str> {
    PROPERTIES.iter().map(|p| p.0)
}

/// Seed of one property's RNG: FNV-1a of its name mixed with the suite seed.
pub fn property_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Runs a single property; `None` for an unknown name.
pub fn run_property(name: &str, seed: u64, trials: usize) -> Option<OracleReport> {
    let &(property, check, quadratic) = PROPERTIES.iter().find(|p| p.0 == name)?;
    let trials = if quadratic { (trials / 10).max(1) } else { trials };
    let mut rng = ChaCha8Rng::seed_from_u64(property_seed(seed, property));
    let mut failures = 0;
    let mut first_counterexample = None;
    for trial in 0..trials {
        if let Err(input) = check(&mut rng) {
            failures += 1;
            first_counterexample.get_or_insert(Counterexample { trial, input });
        }
    }
    Some(OracleReport {
        property: property.into(),
        trials,
        failures,
        first_counterexample,
    })
}

/// Every property in sequence.
pub fn run_suite(seed: u64, trials: usize) -> Vec<OracleReport> {
    property_names().filter_map(|n| run_property(n, seed, trials)).collect()
}

fn random_alphas(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let t = rng.random_range(1..=20);
    (0..t)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random(),
        })
        .collect()
}

/// Distances that are pairwise distinct.
fn distinct_distances(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    ranks.iter().map(|&r| r as f64 + rng.random::<f64>() * 0.5).collect()
}

fn sums_to_one(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let a = random_alphas(rng);
    let p = structure_probs(&a).map_err(|e| format!("{a:?}: {e}"))?;
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() <= 1e-12 {
        Ok(())
    } else {
        Err(format!("alphas={a:?} sum={s}"))
    }
}

fn cdf_is_gate(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let a = random_alphas(rng);
    let p = structure_probs(&a).map_err(|e| format!("{a:?}: {e}"))?;
    let g = gate_row(&a).map_err(|e| format!("{a:?}: {e}"))?;
    let mut cdf = 0.0;
    for (i, (&pi, &gi)) in p.iter().zip(&g).enumerate() {
        cdf += pi;
        if (cdf - gi).abs() > 1e-12 {
            return Err(format!("alphas={a:?} i={i} cdf={cdf} gate={gi}"));
        }
    }
    Ok(())
}

fn gates_monotone(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let t = rng.random_range(1..=20);
    let d: Vec<f64> = (0..=t).map(|_| rng.random::<f64>() * 3.0).collect();
    let tau = rng.random_range(0.1..50.0);
    let a: Vec<f64> = d[..t].iter().map(|&dj| soft_alpha(d[t], dj, tau)).collect();
    let g = gate_row(&a).map_err(|e| format!("{a:?}: {e}"))?;
    match g.windows(2).position(|w| w[0] > w[1]) {
        None => Ok(()),
        Some(i) => Err(format!("d={d:?} tau={tau} i={i}")),
    }
}

fn sharp_gates(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.random_range(2..=12);
    let d = distinct_distances(rng, n);
    let t = n - 1;
    let soft: Vec<f64> = d[..t].iter().map(|&dj| soft_alpha(d[t], dj, 1e9)).collect();
    let hard: Vec<f64> = d[..t].iter().map(|&dj| hard_alpha(d[t], dj)).collect();
    let (gs, gh) = (gate_row(&soft).map_err(|e| format!("{e}"))?, gate_row(&hard).map_err(|e| format!("{e}"))?);
    if gs == gh {
        Ok(())
    } else {
        Err(format!("d={d:?}"))
    }
}

fn no_partial_overlap(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.random_range(1..=12);
    let d = distinct_distances(rng, n);
    match check_no_partial_overlap(&hard_ranges(&d)) {
        None => Ok(()),
        Some(pair) => Err(format!("d={d:?} pair={pair:?}")),
    }
}

fn decoded_tree_valid(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.random_range(1..=12);
    let d = distinct_distances(rng, n);
    let tree = distances_to_tree(n, &d[1..]).map_err(|e| format!("{d:?}: {e}"))?;
    if tree.is_valid(n) {
        Ok(())
    } else {
        Err(format!("d={d:?}"))
    }
}

fn decoder_matches_ranges(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.random_range(1..=10);
    let d = distinct_distances(rng, n);
    let decoded = distances_to_tree(n, &d[1..]).map_err(|e| format!("{d:?}: {e}"))?;
    let rebuilt = tree_from_ranges(&hard_ranges(&d)).map_err(|e| format!("{d:?}: {e}"))?;
    if decoded.spans() == rebuilt.spans() {
        Ok(())
    } else {
        Err(format!("d={d:?}"))
    }
}

fn random_spans(rng: &mut ChaCha8Rng, n: usize) -> SpanSet {
    let k = rng.random_range(0..=n);
    (0..k)
        .map(|_| {
            let a = rng.random_range(0..n);
            let b = rng.random_range(a..n);
            (a, b)
        })
        .collect()
}

fn f1_symmetry(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.random_range(1..=12);
    let (p, g) = (random_spans(rng, n), random_spans(rng, n));
    let (a, b) = (unlabeled_f1(&p, &g, n), unlabeled_f1(&g, &p, n));
    if a.precision == b.recall && a.recall == b.precision && a.f1 == b.f1 {
        Ok(())
    } else {
        Err(format!("n={n} pred={p:?} gold={g:?}"))
    }
}

fn rbranch_self(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.random_range(1..=40);
    let t = baseline_tree(Baseline::Rbranch, n, rng).map_err(|e| format!("{e}"))?;
    if unlabeled_f1(&t.spans(), &t.spans(), n).f1 == 1.0 {
        Ok(())
    } else {
        Err(format!("n={n}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_deterministic() {
        let a = run_suite(3, 500);
        assert_eq!(a.len(), property_names().count());
        for r in &a {
            assert_eq!(r.failures, 0, "{r:?}");
        }
        assert_eq!(a, run_suite(3, 500));
    }

    #[test]
    fn seeds_differ_by_property() {
        assert_ne!(property_seed(1, "a"), property_seed(1, "b"));
        assert_ne!(property_seed(1, "a"), property_seed(2, "a"));
        assert!(run_property("nope", 1, 10).is_none());
    }
}
