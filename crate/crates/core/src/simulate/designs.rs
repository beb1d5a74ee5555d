use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dgp::Population;
use crate::estimate::{EffectData, Effect, Weighting};
use crate::panel::Rounding;
use crate::randomize::{
    assign_within_groups, complete_randomize_with, cutoff_groups, match_tuples_with, quantile_groups, second_stage_groups,
    sorted_order, stratified_block_assign_with, tuple_size_for_fraction, Mechanism,
};
use crate::{Error, Result};

/// The simulation design menu, usable at either stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DesignKind {
    #[serde(rename = "C")]
    C,
    #[serde(rename = "S-2")]
    S2,
    #[serde(rename = "S-4")]
    S4,
    #[serde(rename = "S-4O")]
    S4O,
    #[serde(rename = "MT-A")]
    MtA,
    #[serde(rename = "MT-B")]
    MtB,
    #[serde(rename = "MT-C")]
    MtC,
}

impl DesignKind {
    pub const ALL: [DesignKind; 7] = [
        DesignKind::C,
        DesignKind::S2,
        DesignKind::S4,
        DesignKind::S4O,
        DesignKind::MtA,
        DesignKind::MtB,
        DesignKind::MtC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DesignKind::C => "C",
            DesignKind::S2 => "S-2",
            DesignKind::S4 => "S-4",
            DesignKind::S4O => "S-4O",
            DesignKind::MtA => "MT-A",
            DesignKind::MtB => "MT-B",
            DesignKind::MtC => "MT-C",
        }
    }

    pub fn is_matched(self) -> bool {
        matches!(self, DesignKind::MtA | DesignKind::MtB | DesignKind::MtC)
    }

    /// First-stage designs whose score depends on the estimand weighting.
    pub fn uses_weighting(self) -> bool {
        matches!(self, DesignKind::S4O | DesignKind::MtC)
    }
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DesignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DesignKind::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown design {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DesignPair {
    pub first: DesignKind,
    pub second: DesignKind,
}

impl DesignPair {
    pub fn new(first: DesignKind, second: DesignKind) -> Self {
        DesignPair { first, second }
    }
}

impl fmt::Display for DesignPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.first, self.second)
    }
}

/// First-stage grouping used by the analysis.
#[derive(Debug, Clone, PartialEq)]
pub enum Structure {
    /// Matched tuples in ascending score order.
    Tuples(Vec<Vec<usize>>),
    /// Stratum index per cluster (one stratum for complete randomization).
    Strata(Vec<usize>),
}

/// One realized two-stage assignment on a population.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub treated: Vec<bool>,
    /// Unit-level treatment, aligned with the population's unit arrays.
    pub z: Vec<bool>,
    pub structure: Structure,
}

fn k_l(pi: f64) -> Result<(usize, usize)> {
    let k = tuple_size_for_fraction(pi)?;
    Ok((k, (pi * k as f64).round() as usize))
}

/// First-stage assignment of `design` on `pop`.
pub fn first_stage<R: Rng + ?Sized>(
    pop: &Population,
    design: DesignKind,
    weighting: Weighting,
    pi1: f64,
    rng: &mut R,
) -> Result<(Vec<bool>, Structure)> {
    let g = pop.g();
    let index: Vec<f64> = (0..g).map(|i| pop.cluster_index(i, weighting)).collect();
    let sizes: Vec<f64> = pop.n.iter().map(|&n| n as f64).collect();
    let strata = match design {
        DesignKind::C => vec![0; g],
        DesignKind::S2 => cutoff_groups(&pop.c, &[0.5]),
        DesignKind::S4 => cutoff_groups(&pop.c, &[0.25, 0.5, 0.75]),
        DesignKind::S4O => quantile_groups(&sorted_order(&index)?, 4),
        DesignKind::MtA | DesignKind::MtB | DesignKind::MtC => {
            let scores = match design {
                DesignKind::MtA => &pop.c,
                DesignKind::MtB => &sizes,
                _ => &index,
            };
            let (k, l) = k_l(pi1)?;
            let m = match_tuples_with(scores, k, l, rng)?;
            return Ok((m.treated, Structure::Tuples(m.tuples)));
        }
    };
    let treated = if design == DesignKind::C {
        complete_randomize_with(g, pi1, rng)?
    } else {
        stratified_block_assign_with(&strata, pi1, rng)?
    };
    Ok((treated, Structure::Strata(strata)))
}

/// Second-stage assignment inside cluster `g`; returns one flag per unit.
pub fn second_stage<R: Rng + ?Sized>(
    pop: &Population,
    g: usize,
    design: DesignKind,
    pi2: f64,
    rng: &mut R,
) -> Result<Vec<bool>> {
    let units = pop.units(g);
    let x1: Vec<f64> = units.clone().map(|i| pop.x1[i]).collect();
    let (mechanism, scores, n_strata) = match design {
        DesignKind::C => (Mechanism::Complete, vec![0.0; x1.len()], None),
        DesignKind::S2 => (Mechanism::Sbr, x1, Some(2)),
        DesignKind::S4 => (Mechanism::Sbr, x1, Some(4)),
        DesignKind::S4O => (Mechanism::Sbr, units.map(|i| pop.unit_index(i)).collect(), Some(4)),
        DesignKind::MtA => (Mechanism::MatchedTuples, x1, None),
        DesignKind::MtB => (Mechanism::MatchedTuples, units.map(|i| pop.x2[i]).collect(), None),
        DesignKind::MtC => (Mechanism::MatchedTuples, units.map(|i| pop.unit_index(i)).collect(), None),
    };
    let groups = second_stage_groups(mechanism, &scores, n_strata, None, pi2, rng)?;
    assign_within_groups(&groups, pi2, Rounding::Floor, rng)
}

/// Both stages. `first_rng` drives the cluster assignment; the closure
/// supplies an independent generator per cluster for the second stage.
pub fn realize<R: Rng + ?Sized, S: Rng>(
    pop: &Population,
    pair: DesignPair,
    weighting: Weighting,
    pi1: f64,
    pi2: f64,
    first_rng: &mut R,
    mut cluster_rng: impl FnMut(usize) -> S,
) -> Result<Realization> {
    let (treated, structure) = first_stage(pop, pair.first, weighting, pi1, first_rng)?;
    let mut z = vec![false; pop.x1.len()];
    for g in (0..pop.g()).filter(|&g| treated[g]) {
        let mut rng = cluster_rng(g);
        let zg = second_stage(pop, g, pair.second, pi2, &mut rng)?;
        z[pop.units(g)].copy_from_slice(&zg);
    }
    Ok(Realization { treated, z, structure })
}

/// Observed outcome of unit `i` in cluster `g`.
pub fn observed(pop: &Population, real: &Realization, g: usize, i: usize) -> f64 {
    match (real.treated[g], real.z[i]) {
        (true, true) => pop.y[2][i],
        (true, false) => pop.y[1][i],
        _ => pop.y[0][i],
    }
}

/// Cluster-level averages of sampled observed outcomes for `effect`.
pub fn effect_data(pop: &Population, real: &Realization, effect: Effect) -> Result<EffectData> {
    let g = pop.g();
    let mut data = EffectData {
        y: Vec::with_capacity(g),
        n: pop.n.iter().map(|&n| n as f64).collect(),
        treated: real.treated.clone(),
    };
    for c in 0..g {
        let want_z = effect == Effect::Primary;
        let (mut s, mut m) = (0.0, 0usize);
        for i in pop.units(c).filter(|&i| pop.sampled[i]) {
            if !real.treated[c] || real.z[i] == want_z {
                s += observed(pop, real, c, i);
                m += 1;
            }
        }
        if m == 0 {
            return Err(Error::numeric(format!("cluster {c} has no sampled units in the {effect:?} arm")));
        }
        data.y.push(s / m as f64);
    }
    Ok(data)
}
