//! Parallel runner for the property oracles.

use prpn_core::oracle::{property_names, run_property, OracleReport};
use rayon::prelude::*;

/// Every property on its own thread, each seeded from `(seed, name)`.
/// Reports come back in the fixed property order.
pub fn run_suite(seed: u64, trials: usize) -> Vec<OracleReport> {
    let names: Vec<&str> = property_names().collect();
    names
        .par_iter()
        .filter_map(|name| run_property(name, seed, trials))
        .collect()
}

/// One JSON object per line.
pub fn to_json_lines(reports: &[OracleReport]) -> crate::Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
