use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    assign_within_groups, complete_randomize_with, cutoff_groups, match_tuples_with, quantile_groups, sorted_order,
    stratified_block_assign_with, tuple_size_for_fraction,
};
use crate::panel::{ClusterRecord, DesignMode, ExperimentPanel, Rounding, TupleStructure};
use crate::rng::{self, domain};
use crate::estimate::Weighting;
use crate::simulate::optimal_index_first_stage;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Complete,
    Sbr,
    MatchedTuples,
}

/// Scalar or categorical cluster score used by the first stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterScore {
    /// Cluster covariate column `c_<i>` (1-based).
    Covariate(usize),
    /// Cluster size `n_g`.
    Size,
    /// `c_1 + n_g / 100`.
    OptimalEqual,
    /// `n_g * (c_1 + n_g / 100) - 25 n_g / 3`.
    OptimalSize,
    /// Existing `s_g` labels, used as categorical strata.
    Label,
}

impl ClusterScore {
    fn value(self, c: &ClusterRecord) -> Result<f64> {
        let cov = |i: usize| {
            c.covariates.get(i.wrapping_sub(1)).copied().ok_or_else(|| {
                Error::validation(format!("cluster {} has no covariate c_{}", c.cluster_id, i))
            })
        };
        Ok(match self {
            ClusterScore::Covariate(i) => cov(i)?,
            ClusterScore::Size => c.n_g as f64,
            ClusterScore::OptimalEqual => optimal_index_first_stage(cov(1)?, c.n_g, Weighting::Equal),
            ClusterScore::OptimalSize => optimal_index_first_stage(cov(1)?, c.n_g, Weighting::Size),
            ClusterScore::Label => {
                return Err(Error::config("a categorical label has no scalar value"));
            }
        })
    }
}

/// Scalar or categorical unit score used by the second stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitScore {
    /// Unit covariate column `x_<i>` (1-based).
    Covariate(usize),
    /// `x_numerator / (x_denominator + offset)`.
    Ratio {
        numerator: usize,
        denominator: usize,
        offset: f64,
    },
    /// Existing `b_g` labels.
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStageDesign {
    pub mechanism: Mechanism,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub l: Option<usize>,
    /// Required for complete and SBR designs; derived as `l / k` for matched tuples.
    #[serde(default)]
    pub pi1: Option<f64>,
    #[serde(default)]
    pub score: Option<ClusterScore>,
    /// Number of quantile strata for SBR on a scalar score.
    #[serde(default)]
    pub n_strata: Option<usize>,
    /// Fixed cutoffs for SBR on a scalar score; take precedence over `n_strata`.
    #[serde(default)]
    pub cutoffs: Option<Vec<f64>>,
}

impl FirstStageDesign {
    pub fn pi1(&self) -> Result<f64> {
        match self.mechanism {
            Mechanism::MatchedTuples => {
                let (k, l) = self.k_l()?;
                let derived = l as f64 / k as f64;
                if let Some(p) = self.pi1 {
                    if (p - derived).abs() > 1e-9 {
                        return Err(Error::config(format!(
                            "pi1 = {p} does not match l / k = {l} / {k} for matched tuples"
                        )));
                    }
                }
                Ok(derived)
            }
            _ => self
                .pi1
                .ok_or_else(|| Error::config("pi1 is required for complete and sbr designs")),
        }
    }

    fn k_l(&self) -> Result<(usize, usize)> {
        match (self.k, self.l) {
            (Some(k), Some(l)) if k >= 2 && l > 0 && l < k => Ok((k, l)),
            (Some(k), Some(l)) => Err(Error::config(format!("need k >= 2 and 0 < l < k (got k = {k}, l = {l})"))),
            _ => Err(Error::config("matched tuples need both k and l")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondStageDesign {
    pub mechanism: Mechanism,
    pub pi2: f64,
    #[serde(default)]
    pub score: Option<UnitScore>,
    #[serde(default)]
    pub n_strata: Option<usize>,
    #[serde(default)]
    pub cutoffs: Option<Vec<f64>>,
}

impl SecondStageDesign {
    pub fn complete(pi2: f64) -> Self {
        SecondStageDesign {
            mechanism: Mechanism::Complete,
            pi2,
            score: None,
            n_strata: None,
            cutoffs: None,
        }
    }
}

/// Full two-stage design, as read from the `assign` JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub first_stage: FirstStageDesign,
    pub second_stage: SecondStageDesign,
    #[serde(default)]
    pub rounding: Rounding,
}

/// Record of a realized first-stage assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignManifest {
    pub mechanism: Mechanism,
    pub mode: DesignMode,
    pub k: Option<usize>,
    pub l: Option<usize>,
    pub pi1: f64,
    pub pi2: f64,
    pub seed: u64,
    #[serde(default)]
    pub rounding: Rounding,
    #[serde(default)]
    pub tuples: Vec<Vec<String>>,
    #[serde(default)]
    pub strata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_stage: Option<Mechanism>,
}

impl DesignManifest {
    pub fn tuple_structure(&self) -> TupleStructure {
        let mut ts = match self.mode {
            DesignMode::SmallStrata => {
                TupleStructure::small_strata(self.tuples.clone(), self.k.unwrap_or(0), self.l.unwrap_or(0))
            }
            DesignMode::LargeStrata => TupleStructure::large_strata(self.strata.clone()),
            DesignMode::Complete => TupleStructure::complete(),
        };
        ts.scores = self.scores.clone();
        ts
    }
}

#[derive(Debug, Clone)]
pub struct AssignedPanel {
    pub panel: ExperimentPanel,
    pub manifest: DesignManifest,
}

/// Runs both stages on `clusters` and returns the assigned panel plus its
/// manifest. Clusters without recorded units receive only the first-stage
/// flag; clusters with units must list all `n_g` of them.
pub fn assign_panel(mut clusters: Vec<ClusterRecord>, config: &DesignConfig, seed: u64) -> Result<AssignedPanel> {
    let first = &config.first_stage;
    let pi1 = first.pi1()?;
    let pi2 = config.second_stage.pi2;
    if !(pi2 > 0.0 && pi2 <= 1.0) {
        return Err(Error::config(format!("pi2 = {pi2} must lie in (0, 1]")));
    }
    let mut rng = rng::stream(seed, domain::FIRST_STAGE, 0);
    let g = clusters.len();

    let scalar_scores = |score: Option<ClusterScore>| -> Result<Vec<f64>> {
        let score = score.ok_or_else(|| Error::config("this design needs a `score`"))?;
        clusters.iter().map(|c| score.value(c)).collect()
    };

    let mut manifest = DesignManifest {
        mechanism: first.mechanism,
        mode: DesignMode::Complete,
        k: None,
        l: None,
        pi1,
        pi2,
        seed,
        rounding: config.rounding,
        tuples: Vec::new(),
        strata: BTreeMap::new(),
        scores: None,
        second_stage: Some(config.second_stage.mechanism),
    };

    let treated: Vec<bool>;
    let labels: Vec<String>;
    match first.mechanism {
        Mechanism::Complete => {
            treated = complete_randomize_with(g, pi1, &mut rng)?;
            labels = vec!["all".to_string(); g];
        }
        Mechanism::Sbr => {
            labels = if first.score == Some(ClusterScore::Label) {
                clusters
                    .iter()
                    .map(|c| {
                        c.stratum.clone().ok_or_else(|| {
                            Error::validation(format!("cluster {} has no s_g label", c.cluster_id))
                        })
                    })
                    .collect::<Result<_>>()?
            } else {
                let scores = scalar_scores(first.score)?;
                let groups = match &first.cutoffs {
                    Some(cuts) => cutoff_groups(&scores, cuts),
                    None => quantile_groups(&sorted_order(&scores)?, first.n_strata.unwrap_or(2)),
                };
                groups.into_iter().map(|s| format!("s{s}")).collect()
            };
            treated = stratified_block_assign_with(&labels, pi1, &mut rng)?;
            manifest.mode = DesignMode::LargeStrata;
            manifest.strata = clusters
                .iter()
                .zip(&labels)
                .map(|(c, s)| (c.cluster_id.clone(), s.clone()))
                .collect();
        }
        Mechanism::MatchedTuples => {
            let (k, l) = first.k_l()?;
            let scores = scalar_scores(first.score)?;
            let m = match_tuples_with(&scores, k, l, &mut rng)?;
            let mut tuple_of = vec![String::new(); g];
            for (j, t) in m.tuples.iter().enumerate() {
                for &i in t {
                    tuple_of[i] = format!("t{j}");
                }
            }
            manifest.mode = DesignMode::SmallStrata;
            manifest.k = Some(k);
            manifest.l = Some(l);
            manifest.tuples = m
                .tuples
                .iter()
                .map(|t| t.iter().map(|&i| clusters[i].cluster_id.clone()).collect())
                .collect();
            manifest.scores = Some(
                clusters
                    .iter()
                    .zip(&scores)
                    .map(|(c, &s)| (c.cluster_id.clone(), s))
                    .collect(),
            );
            treated = m.treated;
            labels = tuple_of;
        }
    }

    for (i, c) in clusters.iter_mut().enumerate() {
        c.treated = treated[i];
        c.stratum = Some(labels[i].clone());
        if c.units.is_empty() {
            continue;
        }
        if c.treated {
            let mut rng = rng::stream(seed, domain::SECOND_STAGE, i as u64);
            let (z, groups) = second_stage_for_cluster(c, &config.second_stage, config.rounding, &mut rng)?;
            for ((u, zi), b) in c.units.iter_mut().zip(z).zip(groups) {
                u.z = zi;
                if u.second_stage_stratum.is_none() || config.second_stage.score != Some(UnitScore::Label) {
                    u.second_stage_stratum = Some(format!("b{b}"));
                }
            }
        } else {
            for u in &mut c.units {
                u.z = false;
            }
        }
    }

    let mut panel = ExperimentPanel::new(clusters, pi1, pi2).with_tuples(manifest.tuple_structure());
    panel.rounding = config.rounding;
    Ok(AssignedPanel { panel, manifest })
}

/// Second-stage assignment for one cluster from a seed (stream 0). Control
/// clusters get all-zero assignments without drawing.
pub fn assign_second_stage(
    cluster: &ClusterRecord,
    design: &SecondStageDesign,
    rounding: Rounding,
    seed: u64,
) -> Result<Vec<bool>> {
    if !cluster.treated {
        return Ok(vec![false; cluster.units.len()]);
    }
    let mut rng = rng::stream(seed, domain::SECOND_STAGE, 0);
    Ok(second_stage_for_cluster(cluster, design, rounding, &mut rng)?.0)
}

fn second_stage_for_cluster<R: Rng + ?Sized>(
    cluster: &ClusterRecord,
    design: &SecondStageDesign,
    rounding: Rounding,
    rng: &mut R,
) -> Result<(Vec<bool>, Vec<usize>)> {
    if cluster.units.len() != cluster.n_g {
        return Err(Error::validation(format!(
            "cluster {}: second-stage assignment needs all N_g = {} units, {} recorded",
            cluster.cluster_id,
            cluster.n_g,
            cluster.units.len()
        )));
    }
    let groups = if design.score == Some(UnitScore::Label) {
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        cluster
            .units
            .iter()
            .map(|u| {
                let label = u.second_stage_stratum.as_deref().ok_or_else(|| {
                    Error::validation(format!("cluster {}: unit {} has no b_g label", cluster.cluster_id, u.unit_id))
                })?;
                let next = ids.len();
                Ok(*ids.entry(label).or_insert(next))
            })
            .collect::<Result<Vec<usize>>>()?
    } else {
        let scores: Vec<f64> = match design.score {
            None => vec![0.0; cluster.units.len()],
            Some(score) => cluster
                .units
                .iter()
                .map(|u| unit_score(score, &u.covariates))
                .collect::<Option<_>>()
                .ok_or_else(|| {
                    Error::validation(format!("cluster {}: unit covariates missing for score", cluster.cluster_id))
                })?,
        };
        if design.mechanism != Mechanism::Complete && design.score.is_none() {
            return Err(Error::config("second-stage sbr and matched tuples need a `score`"));
        }
        second_stage_groups(design.mechanism, &scores, design.n_strata, design.cutoffs.as_deref(), design.pi2, rng)?
    };
    let z = assign_within_groups(&groups, design.pi2, rounding, rng)?;
    Ok((z, groups))
}

fn unit_score(score: UnitScore, x: &[f64]) -> Option<f64> {
    let col = |i: usize| x.get(i.wrapping_sub(1)).copied();
    match score {
        UnitScore::Covariate(i) => col(i),
        UnitScore::Ratio {
            numerator,
            denominator,
            offset,
        } => Some(col(numerator)? / (col(denominator)? + offset)),
        UnitScore::Label => None,
    }
}

/// Second-stage grouping of units by scalar score. Ties are broken uniformly
/// at random, so constant scores reproduce the complete-randomization law.
pub fn second_stage_groups<R: Rng + ?Sized>(
    mechanism: Mechanism,
    scores: &[f64],
    n_strata: Option<usize>,
    cutoffs: Option<&[f64]>,
    pi2: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = scores.len();
    if mechanism == Mechanism::Complete {
        return Ok(vec![0; n]);
    }
    if mechanism == Mechanism::Sbr {
        if let Some(cuts) = cutoffs {
            return Ok(cutoff_groups(scores, cuts));
        }
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::validation(format!("unit score at position {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    Ok(match mechanism {
        Mechanism::Sbr => quantile_groups(&order, n_strata.unwrap_or(2)),
        _ => {
            // Units left over after forming full tuples are drawn uniformly,
            // then the rest are matched in score order.
            let k = tuple_size_for_fraction(pi2)?;
            let extra = n % k;
            let mut left_out = vec![false; n];
            for pos in rand::seq::index::sample(rng, n, extra) {
                left_out[order[pos]] = true;
            }
            let mut groups = vec![n / k; n];
            for (rank, &i) in order.iter().filter(|&&i| !left_out[i]).enumerate() {
                groups[i] = rank / k;
            }
            groups
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{validate_panel, UnitRecord};

    fn clusters(g: usize, n: usize) -> Vec<ClusterRecord> {
        (0..g)
            .map(|i| {
                let mut c = ClusterRecord::new(format!("g{i:03}"), n, false);
                c.covariates = vec![(i as f64 * 0.37) % 1.0];
                c.units = (0..n)
                    .map(|j| {
                        let mut u = UnitRecord::new(format!("u{j}"), 0.0, false);
                        u.covariates = vec![((i * n + j) as f64 * 0.61) % 1.0, ((j as f64) * 0.13) % 1.0];
                        u
                    })
                    .collect();
                c
            })
            .collect()
    }

    fn mt_config() -> DesignConfig {
        DesignConfig {
            first_stage: FirstStageDesign {
                mechanism: Mechanism::MatchedTuples,
                k: Some(2),
                l: Some(1),
                pi1: None,
                score: Some(ClusterScore::OptimalEqual),
                n_strata: None,
                cutoffs: None,
            },
            second_stage: SecondStageDesign {
                mechanism: Mechanism::MatchedTuples,
                pi2: 0.5,
                score: Some(UnitScore::Ratio {
                    numerator: 1,
                    denominator: 2,
                    offset: 0.1,
                }),
                n_strata: None,
                cutoffs: None,
            },
            rounding: Rounding::Floor,
        }
    }

    #[test]
    fn assigned_panel_validates() {
        let out = assign_panel(clusters(20, 7), &mt_config(), 42).unwrap();
        let report = validate_panel(&out.panel);
        assert!(report.passed(), "{:?}", report.violations);
        assert_eq!(out.manifest.tuples.len(), 10);
        for c in &out.panel.clusters {
            let treated_units = c.units.iter().filter(|u| u.z).count();
            assert_eq!(treated_units, if c.treated { 3 } else { 0 });
        }
    }

    #[test]
    fn assignment_is_deterministic() {
        let a = assign_panel(clusters(20, 7), &mt_config(), 42).unwrap();
        let b = assign_panel(clusters(20, 7), &mt_config(), 42).unwrap();
        assert_eq!(a.panel, b.panel);
        assert_eq!(a.manifest, b.manifest);
    }

    #[test]
    fn mismatched_pi1_is_rejected() {
        let mut cfg = mt_config();
        cfg.first_stage.pi1 = Some(0.4);
        assert!(assign_panel(clusters(4, 3), &cfg, 1).is_err());
    }

    #[test]
    fn sbr_on_quantiles_is_balanced() {
        let mut cfg = mt_config();
        cfg.first_stage = FirstStageDesign {
            mechanism: Mechanism::Sbr,
            k: None,
            l: None,
            pi1: Some(0.5),
            score: Some(ClusterScore::OptimalEqual),
            n_strata: Some(4),
            cutoffs: None,
        };
        let out = assign_panel(clusters(40, 4), &cfg, 3).unwrap();
        assert_eq!(out.manifest.mode, DesignMode::LargeStrata);
        let labels: Vec<&String> = out.panel.clusters.iter().map(|c| &out.manifest.strata[&c.cluster_id]).collect();
        let treated: Vec<bool> = out.panel.clusters.iter().map(|c| c.treated).collect();
        for d in super::super::stratum_imbalance(&labels, &treated, 0.5).values() {
            assert!(d.abs() <= 1.0);
        }
    }

    #[test]
    fn two_unit_complete_second_stage_treats_one() {
        let mut c = ClusterRecord::new("h", 2, true);
        c.units = vec![UnitRecord::new("a", 0.0, false), UnitRecord::new("b", 0.0, false)];
        let z = assign_second_stage(&c, &SecondStageDesign::complete(0.5), Rounding::Floor, 8).unwrap();
        assert_eq!(z.iter().filter(|&&t| t).count(), 1);
    }

    #[test]
    fn matched_pairs_second_stage_treats_one_per_pair() {
        let mut c = ClusterRecord::new("h", 100, true);
        c.units = (0..100)
            .map(|j| {
                let mut u = UnitRecord::new(format!("u{j}"), 0.0, false);
                u.covariates = vec![((j * 7919) % 101) as f64 / 101.0, ((j * 31) % 17) as f64 / 17.0];
                u
            })
            .collect();
        let design = mt_config().second_stage;
        let z = assign_second_stage(&c, &design, Rounding::Floor, 5).unwrap();
        assert_eq!(z.iter().filter(|&&t| t).count(), 50);
        let scores: Vec<f64> = c.units.iter().map(|u| u.covariates[0] / (u.covariates[1] + 0.1)).collect();
        let order = sorted_order(&scores).unwrap();
        for pair in order.chunks(2) {
            // Distinct scores, so the pairs are unique.
            assert_eq!(pair.iter().filter(|&&i| z[i]).count(), 1);
        }
    }

    #[test]
    fn constant_scores_match_complete_randomization_law() {
        // With identical scores, every 2-subset of 4 units should appear with probability 1/6.
        let mut counts = BTreeMap::new();
        let reps = 12_000;
        for seed in 0..reps {
            let mut rng = rng::stream(seed, domain::SECOND_STAGE, 0);
            let groups = second_stage_groups(Mechanism::MatchedTuples, &[1.0; 4], None, None, 0.5, &mut rng).unwrap();
            let z = assign_within_groups(&groups, 0.5, Rounding::Floor, &mut rng).unwrap();
            *counts.entry(z).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (pattern, &c) in &counts {
            let freq = c as f64 / reps as f64;
            assert!((freq - 1.0 / 6.0).abs() < 0.015, "{pattern:?}: {freq}");
        }
    }
}
