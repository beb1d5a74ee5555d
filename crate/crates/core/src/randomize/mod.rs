//! First-stage (cluster) and second-stage (unit) assignment mechanisms.
//!
//! The primitives here work on plain slices and an explicit generator so the
//! simulation harness can call them without building a panel. Seed-taking
//! wrappers derive their generator from [`crate::rng::stream`].

mod design;

pub use design::{
    assign_panel, assign_second_stage, second_stage_groups, AssignedPanel, ClusterScore, DesignConfig, DesignManifest, FirstStageDesign, Mechanism,
    SecondStageDesign, UnitScore,
};

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::panel::Rounding;
use crate::rng::{self, domain};
use crate::{Error, Result};

/// Output of [`match_tuples`]: tuples of cluster positions in ascending score
/// order, and the treatment flag per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedTuples {
    pub tuples: Vec<Vec<usize>>,
    pub treated: Vec<bool>,
}

/// Treats exactly `floor(pi1 * g)` of `g` clusters, uniformly over subsets.
pub fn complete_randomize(g: usize, pi1: f64, seed: u64) -> Result<Vec<bool>> {
    complete_randomize_with(g, pi1, &mut rng::stream(seed, domain::FIRST_STAGE, 0))
}

pub fn complete_randomize_with<R: Rng + ?Sized>(g: usize, pi1: f64, rng: &mut R) -> Result<Vec<bool>> {
    check_fraction(pi1, "pi1")?;
    let treated = Rounding::Floor.treated_count(pi1, g);
    if treated == 0 {
        return Err(Error::validation(format!(
            "floor(pi1 * G) = floor({pi1} * {g}) = 0: no cluster would be treated"
        )));
    }
    let mut flags = vec![false; g];
    let idx: Vec<usize> = (0..g).collect();
    for &i in idx.choose_multiple(rng, treated) {
        flags[i] = true;
    }
    Ok(flags)
}

/// Stratified block randomization: within each stratum, `floor(pi1 * G(s))`
/// clusters are treated uniformly at random.
pub fn stratified_block_assign<L: Ord>(strata: &[L], pi1: f64, seed: u64) -> Result<Vec<bool>> {
    stratified_block_assign_with(strata, pi1, &mut rng::stream(seed, domain::FIRST_STAGE, 0))
}

pub fn stratified_block_assign_with<L: Ord, R: Rng + ?Sized>(
    strata: &[L],
    pi1: f64,
    rng: &mut R,
) -> Result<Vec<bool>> {
    check_fraction(pi1, "pi1")?;
    if strata.is_empty() {
        return Err(Error::validation("stratified assignment needs at least one cluster"));
    }
    let mut members: BTreeMap<&L, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata.iter().enumerate() {
        members.entry(s).or_default().push(i);
    }
    let mut flags = vec![false; strata.len()];
    for (pos, idx) in members.values().enumerate() {
        if idx.len() < 2 {
            return Err(Error::validation(format!(
                "stratum #{pos} has {} cluster(s); stratified assignment needs at least 2 per stratum",
                idx.len()
            )));
        }
        let treated = Rounding::Floor.treated_count(pi1, idx.len());
        for &i in idx.choose_multiple(rng, treated) {
            flags[i] = true;
        }
    }
    Ok(flags)
}

/// Within-stratum imbalance `D(s) = sum (1{treated} - pi1)` per stratum label.
pub fn stratum_imbalance<L: Ord + Clone>(strata: &[L], treated: &[bool], pi1: f64) -> BTreeMap<L, f64> {
    let mut out = BTreeMap::new();
    for (s, &t) in strata.iter().zip(treated) {
        *out.entry(s.clone()).or_insert(0.0) += f64::from(u8::from(t)) - pi1;
    }
    out
}

/// Matched tuples on a scalar score: clusters are sorted ascending (ties keep
/// input order), consecutive blocks of `k` form tuples, and inside each tuple
/// a uniformly random subset of `l` clusters is treated.
pub fn match_tuples(scores: &[f64], k: usize, l: usize, seed: u64) -> Result<MatchedTuples> {
    match_tuples_with(scores, k, l, &mut rng::stream(seed, domain::FIRST_STAGE, 0))
}

pub fn match_tuples_with<R: Rng + ?Sized>(scores: &[f64], k: usize, l: usize, rng: &mut R) -> Result<MatchedTuples> {
    if k < 2 || l == 0 || l >= k {
        return Err(Error::config(format!("matched tuples need k >= 2 and 0 < l < k (got k = {k}, l = {l})")));
    }
    let g = scores.len();
    if !g.is_multiple_of(k) {
        return Err(Error::validation(format!(
            "G = {g} is not divisible by k = {k} (remainder {})",
            g % k
        )));
    }
    let order = sorted_order(scores)?;
    let mut treated = vec![false; g];
    let tuples: Vec<Vec<usize>> = order.chunks(k).map(<[usize]>::to_vec).collect();
    for tuple in &tuples {
        for &i in tuple.choose_multiple(rng, l) {
            treated[i] = true;
        }
    }
    Ok(MatchedTuples { tuples, treated })
}

/// Stable ascending order of `scores`; rejects NaN.
pub fn sorted_order(scores: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::validation(format!("score at position {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    Ok(order)
}

/// Rank-based quantile groups: the `i`-th smallest of `n` scores goes to
/// group `floor(i * n_groups / n)`, giving groups of (near) equal size.
pub fn quantile_groups(order: &[usize], n_groups: usize) -> Vec<usize> {
    let n = order.len();
    let mut groups = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        groups[i] = rank * n_groups / n.max(1);
    }
    groups
}

/// Group label = number of cutoffs strictly below or equal to the score.
pub fn cutoff_groups(scores: &[f64], cutoffs: &[f64]) -> Vec<usize> {
    scores
        .iter()
        .map(|s| cutoffs.iter().filter(|&&c| *s >= c).count())
        .collect()
}

/// Smallest tuple size `k` with `pi2 * k` integral (1 when `pi2 = 1`).
pub fn tuple_size_for_fraction(pi2: f64) -> Result<usize> {
    (1..=1000)
        .find(|&k| {
            let x = pi2 * k as f64;
            (x - x.round()).abs() < 1e-9
        })
        .ok_or_else(|| Error::config(format!("pi2 = {pi2} is not a fraction with denominator <= 1000")))
}

/// Assigns `rounding(frac * n)` treated units across the `groups` (one label
/// per unit). Each group first receives `floor(frac * size)` treated units
/// uniformly at random; any remaining deficit is spread one unit at a time
/// over uniformly chosen distinct groups.
pub fn assign_within_groups<R: Rng + ?Sized>(
    groups: &[usize],
    frac: f64,
    rounding: Rounding,
    rng: &mut R,
) -> Result<Vec<bool>> {
    let n = groups.len();
    if frac * (n as f64) < 1.0 {
        return Err(Error::validation(format!(
            "cluster too small to treat any unit: pi2 * N = {frac} * {n} < 1"
        )));
    }
    let target = rounding.treated_count(frac, n);
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let mut z = vec![false; n];
    // Untreated members per group, in a random order.
    let mut pools: Vec<Vec<usize>> = Vec::with_capacity(members.len());
    let mut assigned = 0;
    for idx in members.into_values() {
        let mut pool = idx;
        pool.shuffle(rng);
        let base = Rounding::Floor.treated_count(frac, pool.len());
        for i in pool.drain(..base) {
            z[i] = true;
        }
        assigned += base;
        pools.push(pool);
    }
    let mut deficit = target.saturating_sub(assigned);
    while deficit > 0 {
        let mut eligible: Vec<usize> = (0..pools.len()).filter(|&b| !pools[b].is_empty()).collect();
        if eligible.is_empty() {
            break;
        }
        eligible.shuffle(rng);
        for &b in eligible.iter().take(deficit) {
            let i = pools[b].pop().expect("eligible pool is non-empty");
            z[i] = true;
            deficit -= 1;
        }
    }
    Ok(z)
}

fn check_fraction(p: f64, name: &str) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} = {p} must lie in (0, 1)")))
    }
}
