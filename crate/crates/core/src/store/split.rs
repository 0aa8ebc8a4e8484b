use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClipRecord, Manifest, Split};
use crate::error::{Error, Result};

/// Assigns every record a split so that all clips of one source share a
/// split. `ratios` are relative weights for train, validation and test.
///
/// Sources are shuffled with `seed`; the first two go to validation and
/// test, the rest greedily to whichever split is furthest below its target
/// clip count, weighted by the source's label mix.
pub fn build_manifest(mut records: Vec<ClipRecord>, ratios: [u32; 3], seed: u64) -> Result<Manifest> {
    let total_w: u32 = ratios.iter().sum();
    if total_w == 0 {
        return Err(Error::Config("split ratios must not all be zero".into()));
    }
    let mut sources: BTreeMap<&str, [usize; 2]> = BTreeMap::new();
    for r in &records {
        sources.entry(r.source_id.as_str()).or_default()[r.label.index()] += 1;
    }
    if sources.len() < 3 {
        return Err(Error::Stratification(format!(
            "{} distinct sources; at least 3 are needed for three disjoint splits",
            sources.len()
        )));
    }
    let mut order: Vec<(&str, [usize; 2])> = sources.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut label_totals = [0usize; 2];
    for (_, c) in &order {
        label_totals[0] += c[0];
        label_totals[1] += c[1];
    }
    let target = |s: usize, l: usize| ratios[s] as f64 / total_w as f64 * label_totals[l] as f64;
    let mut have = [[0usize; 2]; 3];
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    for (i, (src, counts)) in order.iter().enumerate() {
        let split = match i {
            0 if ratios[1] > 0 => Split::Validation,
            1 if ratios[2] > 0 => Split::Test,
            _ => {
                let deficit = |s: usize| -> f64 {
                    (0..2)
                        .map(|l| counts[l] as f64 * (target(s, l) - have[s][l] as f64))
                        .sum()
                };
                let mut best = 0;
                for s in 1..3 {
                    if ratios[s] > 0 && (ratios[best] == 0 || deficit(s) > deficit(best)) {
                        best = s;
                    }
                }
                Split::ALL[best]
            }
        };
        have[split.index()][0] += counts[0];
        have[split.index()][1] += counts[1];
        assignment.insert(src.to_string(), split);
    }
    for r in &mut records {
        r.split = assignment[&r.source_id];
    }
    Manifest::new(records)
}
