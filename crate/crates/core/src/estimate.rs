//! Cluster averages, the four effect estimators, size-weighted adjusted
//! outcomes and the covariate-adjusted size-weighted primary estimator.
//!
//! The numerical core works on [`EffectData`]: one cluster-level average per
//! cluster for the arm of interest, plus sizes and the cluster assignment.
//! Panel-level functions build that view in `cluster_id` order so that
//! floating-point sums do not depend on input row order.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::panel::{DesignMode, ExperimentPanel, UnitRecord};
use crate::{Error, Result};

/// Which unit arm enters the treated-cluster average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    /// Treated units in treated clusters (`z = 1`).
    Primary,
    /// Untreated units in treated clusters (`z = 0`).
    Spillover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Equal,
    Size,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "theta_p1")]
    ThetaP1,
    #[serde(rename = "theta_s1")]
    ThetaS1,
    #[serde(rename = "theta_p2")]
    ThetaP2,
    #[serde(rename = "theta_s2")]
    ThetaS2,
}

impl Estimand {
    pub const ALL: [Estimand; 4] = [Estimand::ThetaP1, Estimand::ThetaP2, Estimand::ThetaS1, Estimand::ThetaS2];

    pub fn new(effect: Effect, weighting: Weighting) -> Self {
        match (effect, weighting) {
            (Effect::Primary, Weighting::Equal) => Estimand::ThetaP1,
            (Effect::Spillover, Weighting::Equal) => Estimand::ThetaS1,
            (Effect::Primary, Weighting::Size) => Estimand::ThetaP2,
            (Effect::Spillover, Weighting::Size) => Estimand::ThetaS2,
        }
    }

    pub fn effect(self) -> Effect {
        match self {
            Estimand::ThetaP1 | Estimand::ThetaP2 => Effect::Primary,
            _ => Effect::Spillover,
        }
    }

    pub fn weighting(self) -> Weighting {
        match self {
            Estimand::ThetaP1 | Estimand::ThetaS1 => Weighting::Equal,
            _ => Weighting::Size,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Estimand::ThetaP1 => "theta_p1",
            Estimand::ThetaS1 => "theta_s1",
            Estimand::ThetaP2 => "theta_p2",
            Estimand::ThetaS2 => "theta_s2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Estimand::ALL.into_iter().find(|e| e.name() == s)
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterAverages {
    pub cluster_id: String,
    /// `None` when the cluster has no sampled unit in that arm.
    pub ybar1: Option<f64>,
    pub ybar0: Option<f64>,
    pub m1: usize,
    pub m0: usize,
    pub m: usize,
    pub n: usize,
    pub treated: bool,
}

impl ClusterAverages {
    pub fn ybar(&self, effect: Effect) -> Option<f64> {
        match effect {
            Effect::Primary => self.ybar1,
            Effect::Spillover => self.ybar0,
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn averages_of(cluster_id: &str, n: usize, treated: bool, units: &[&UnitRecord]) -> ClusterAverages {
    let m = units.len();
    let m1 = if treated { units.iter().filter(|u| u.z).count() } else { 0 };
    let (ybar1, ybar0) = if treated {
        (
            mean(units.iter().filter(|u| u.z).map(|u| u.outcome)),
            mean(units.iter().filter(|u| !u.z).map(|u| u.outcome)),
        )
    } else {
        let all = mean(units.iter().map(|u| u.outcome));
        (all, all)
    };
    ClusterAverages {
        cluster_id: cluster_id.to_string(),
        ybar1,
        ybar0,
        m1,
        m0: m - m1,
        m,
        n,
        treated,
    }
}

/// Per-cluster averages, in `cluster_id` order.
pub fn cluster_averages(panel: &ExperimentPanel) -> Vec<ClusterAverages> {
    sorted_indices(panel)
        .into_iter()
        .map(|i| {
            let c = &panel.clusters[i];
            let units: Vec<&UnitRecord> = c.sampled_units().collect();
            averages_of(&c.cluster_id, c.n_g, c.treated, &units)
        })
        .collect()
}

/// Panel indices sorted by `cluster_id`.
pub fn sorted_indices(panel: &ExperimentPanel) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..panel.g()).collect();
    idx.sort_by(|&a, &b| panel.clusters[a].cluster_id.cmp(&panel.clusters[b].cluster_id));
    idx
}

/// Cluster-level view of one arm: the average `y` that enters the estimator,
/// the cluster size and the assignment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EffectData {
    pub y: Vec<f64>,
    pub n: Vec<f64>,
    pub treated: Vec<bool>,
}

impl EffectData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn arm_counts(&self) -> (usize, usize) {
        let g1 = self.treated.iter().filter(|&&t| t).count();
        (g1, self.len() - g1)
    }

    fn check_arms(&self) -> Result<()> {
        match self.arm_counts() {
            (0, _) => Err(Error::validation("no treated clusters (G1 = 0)")),
            (_, 0) => Err(Error::validation("no control clusters (G0 = 0)")),
            _ => Ok(()),
        }
    }

    pub fn mean_size(&self) -> f64 {
        self.n.iter().sum::<f64>() / self.len() as f64
    }
}

/// Point estimate for one arm and weighting from cluster-level data.
pub fn theta(data: &EffectData, weighting: Weighting) -> Result<f64> {
    data.check_arms()?;
    let (mut s1, mut w1, mut s0, mut w0) = (0.0, 0.0, 0.0, 0.0);
    for ((&y, &n), &t) in data.y.iter().zip(&data.n).zip(&data.treated) {
        let w = match weighting {
            Weighting::Equal => 1.0,
            Weighting::Size => n,
        };
        if t {
            s1 += w * y;
            w1 += w;
        } else {
            s0 += w * y;
            w0 += w;
        }
    }
    Ok(s1 / w1 - s0 / w0)
}

/// Size-weighted adjusted outcomes: `(N_g / Nbar) (Y_g - A / Nbar)` with `A`
/// the own-arm average of `N_j Y_j`.
pub fn adjusted_values(data: &EffectData) -> Vec<f64> {
    let nbar = data.mean_size();
    let mut arm_sum = [0.0; 2];
    let mut arm_count = [0usize; 2];
    for ((&y, &n), &t) in data.y.iter().zip(&data.n).zip(&data.treated) {
        arm_sum[t as usize] += y * n;
        arm_count[t as usize] += 1;
    }
    data.y
        .iter()
        .zip(&data.n)
        .zip(&data.treated)
        .map(|((&y, &n), &t)| {
            let a = arm_sum[t as usize] / arm_count[t as usize] as f64;
            (n / nbar) * (y - a / nbar)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateOptions {
    /// Drop treated clusters with no sampled control unit from spillover
    /// computations instead of failing. Under matched tuples the whole tuple
    /// is dropped.
    #[serde(default)]
    pub allow_missing_spillover: bool,
}

/// Cluster-level view of `panel` for `effect`, plus the panel index of each
/// retained cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmView {
    pub data: EffectData,
    pub index: Vec<usize>,
    pub dropped: Vec<String>,
}

pub fn arm_view(panel: &ExperimentPanel, effect: Effect, opts: EstimateOptions) -> Result<ArmView> {
    let avgs = cluster_averages(panel);
    let order = sorted_indices(panel);
    let mut missing = Vec::new();
    for a in &avgs {
        if a.ybar(effect).is_none() {
            if a.treated && effect == Effect::Spillover && opts.allow_missing_spillover {
                missing.push(a.cluster_id.clone());
                continue;
            }
            let arm = if a.treated { format!("z = {}", (effect == Effect::Primary) as u8) } else { "any".into() };
            return Err(Error::validation(format!(
                "cluster {} has no sampled units in arm {arm}",
                a.cluster_id
            )));
        }
    }
    let mut dropped: Vec<String> = missing.clone();
    if !missing.is_empty() {
        if let Some(ts) = panel.tuple_structure.as_ref().filter(|t| t.mode == DesignMode::SmallStrata) {
            for t in &ts.tuples {
                if t.iter().any(|id| missing.contains(id)) {
                    for id in t {
                        if !dropped.contains(id) {
                            dropped.push(id.clone());
                        }
                    }
                }
            }
        }
    }
    let mut view = ArmView {
        data: EffectData::default(),
        index: Vec::new(),
        dropped,
    };
    for (a, i) in avgs.iter().zip(order) {
        if view.dropped.contains(&a.cluster_id) {
            continue;
        }
        view.data.y.push(a.ybar(effect).expect("checked above"));
        view.data.n.push(a.n as f64);
        view.data.treated.push(a.treated);
        view.index.push(i);
    }
    view.dropped.sort();
    Ok(view)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointEstimates {
    pub theta_p1: f64,
    pub theta_s1: f64,
    pub theta_p2: f64,
    pub theta_s2: f64,
}

impl PointEstimates {
    pub fn get(&self, e: Estimand) -> f64 {
        match e {
            Estimand::ThetaP1 => self.theta_p1,
            Estimand::ThetaS1 => self.theta_s1,
            Estimand::ThetaP2 => self.theta_p2,
            Estimand::ThetaS2 => self.theta_s2,
        }
    }
}

pub fn point_estimates(panel: &ExperimentPanel) -> Result<PointEstimates> {
    point_estimates_with(panel, EstimateOptions::default())
}

pub fn point_estimates_with(panel: &ExperimentPanel, opts: EstimateOptions) -> Result<PointEstimates> {
    let p = arm_view(panel, Effect::Primary, opts)?.data;
    let s = arm_view(panel, Effect::Spillover, opts)?.data;
    Ok(PointEstimates {
        theta_p1: theta(&p, Weighting::Equal)?,
        theta_s1: theta(&s, Weighting::Equal)?,
        theta_p2: theta(&p, Weighting::Size)?,
        theta_s2: theta(&s, Weighting::Size)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjustedAverages {
    pub cluster_id: String,
    pub ytilde1: f64,
    pub ytilde0: f64,
}

/// Adjusted outcomes for both arms, in `cluster_id` order.
pub fn adjusted_outcomes(panel: &ExperimentPanel) -> Result<Vec<AdjustedAverages>> {
    let p = arm_view(panel, Effect::Primary, EstimateOptions::default())?;
    let s = arm_view(panel, Effect::Spillover, EstimateOptions::default())?;
    p.data.check_arms()?;
    let t1 = adjusted_values(&p.data);
    let t0 = adjusted_values(&s.data);
    Ok(p.index
        .iter()
        .zip(t1.into_iter().zip(t0))
        .map(|(&i, (ytilde1, ytilde0))| AdjustedAverages {
            cluster_id: panel.clusters[i].cluster_id.clone(),
            ytilde1,
            ytilde0,
        })
        .collect())
}

/// Result of the covariate-adjusted size-weighted primary estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateAdjustment {
    pub psi: Vec<Vec<f64>>,
    /// Slopes on the tuple differences of `psi` (intercept excluded).
    pub beta_hat: Vec<f64>,
    pub intercept: f64,
    pub theta_p2_adj: f64,
    /// Components of `psi` with no variation in tuple differences; their
    /// slope is fixed at zero.
    pub constant_components: Vec<usize>,
}

/// Core of the covariate adjustment. `data` holds primary-arm averages,
/// `tuples` index into `data`, `psi` has one row per cluster.
pub fn covariate_adjustment_core(
    data: &EffectData,
    tuples: &[Vec<usize>],
    psi: &[Vec<f64>],
) -> Result<CovariateAdjustment> {
    data.check_arms()?;
    let g = data.len();
    if psi.len() != g {
        return Err(Error::validation(format!("psi has {} rows for {} clusters", psi.len(), g)));
    }
    let p = psi.first().map_or(0, |r| r.len());
    if psi.iter().any(|r| r.len() != p) {
        return Err(Error::validation("psi rows have different lengths"));
    }
    let nbar = data.mean_size();
    let ytilde = adjusted_values(data);
    let n_tuples = tuples.len();

    let mut mu_diff = DVector::zeros(n_tuples);
    let mut psi_diff = DMatrix::zeros(n_tuples, p);
    for (j, t) in tuples.iter().enumerate() {
        let l = t.iter().filter(|&&i| data.treated[i]).count();
        let c = t.len() - l;
        if l == 0 || c == 0 {
            return Err(Error::validation(format!("tuple {j} lacks a treated or control cluster")));
        }
        for &i in t {
            let w = if data.treated[i] { 1.0 / l as f64 } else { -1.0 / c as f64 };
            mu_diff[j] += w * ytilde[i] * nbar;
            for d in 0..p {
                psi_diff[(j, d)] += w * psi[i][d];
            }
        }
    }

    let mut constant = Vec::new();
    let mut kept = Vec::new();
    for d in 0..p {
        let col = psi_diff.column(d);
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let scale = psi.iter().map(|r| r[d].abs()).fold(0.0, f64::max).max(1.0);
        if hi - lo <= 1e-10 * scale {
            constant.push(d);
        } else {
            kept.push(d);
        }
    }

    let mut x = DMatrix::from_element(n_tuples, 1 + kept.len(), 1.0);
    for (c, &d) in kept.iter().enumerate() {
        x.set_column(c + 1, &psi_diff.column(d));
    }
    let names: Vec<String> = std::iter::once("intercept".to_string())
        .chain(kept.iter().map(|d| format!("psi_{}", d + 1)))
        .collect();
    if n_tuples < x.ncols() {
        return Err(Error::numeric(format!(
            "{} tuples cannot identify {} regression coefficients",
            n_tuples,
            x.ncols()
        )));
    }
    let coef = linalg::least_squares(&x, &mu_diff, &names)?;
    let mut beta = vec![0.0; p];
    for (c, &d) in kept.iter().enumerate() {
        beta[d] = coef[c + 1];
    }

    let psi_bar: Vec<f64> = (0..p).map(|d| psi.iter().map(|r| r[d]).sum::<f64>() / g as f64).collect();
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..g {
        let shift: f64 = (0..p).map(|d| (psi[i][d] - psi_bar[d]) * beta[d]).sum();
        let v = data.n[i] * data.y[i] - shift;
        if data.treated[i] {
            s1 += v;
            n1 += data.n[i];
        } else {
            s0 += v;
            n0 += data.n[i];
        }
    }
    Ok(CovariateAdjustment {
        psi: psi.to_vec(),
        beta_hat: beta,
        intercept: coef[0],
        theta_p2_adj: s1 / n1 - s0 / n0,
        constant_components: constant,
    })
}

/// `Y_tilde - (psi - psi_bar)' beta / Nbar`, the outcomes that enter the
/// variance of the adjusted estimator.
pub fn adjusted_residual_values(data: &EffectData, psi: &[Vec<f64>], beta: &[f64]) -> Vec<f64> {
    let g = data.len();
    let nbar = data.mean_size();
    let p = beta.len();
    let psi_bar: Vec<f64> = (0..p).map(|d| psi.iter().map(|r| r[d]).sum::<f64>() / g as f64).collect();
    adjusted_values(data)
        .into_iter()
        .enumerate()
        .map(|(i, yt)| yt - (0..p).map(|d| (psi[i][d] - psi_bar[d]) * beta[d]).sum::<f64>() / nbar)
        .collect()
}

/// Tuples of a small-strata panel as index lists into `index` (the retained
/// clusters of an [`ArmView`]).
pub fn tuple_indices(panel: &ExperimentPanel, index: &[usize]) -> Result<Vec<Vec<usize>>> {
    let ts = panel
        .tuple_structure
        .as_ref()
        .filter(|t| t.mode == DesignMode::SmallStrata)
        .ok_or_else(|| Error::validation("this computation needs a matched-tuples (small strata) structure"))?;
    let pos: BTreeMap<&str, usize> = index
        .iter()
        .enumerate()
        .map(|(p, &i)| (panel.clusters[i].cluster_id.as_str(), p))
        .collect();
    let mut out = Vec::new();
    for t in &ts.tuples {
        let members: Vec<Option<usize>> = t.iter().map(|id| pos.get(id.as_str()).copied()).collect();
        if members.iter().all(Option::is_some) {
            out.push(members.into_iter().flatten().collect());
        } else if members.iter().any(Option::is_some) {
            return Err(Error::validation(format!("tuple {:?} is only partly present", t)));
        }
    }
    // Re-sort tuples by mean first-stage score when scores are known.
    if let Some(scores) = &ts.scores {
        let mean_score = |t: &Vec<usize>| {
            t.iter()
                .map(|&p| scores.get(&panel.clusters[index[p]].cluster_id).copied().unwrap_or(f64::NAN))
                .sum::<f64>()
                / t.len() as f64
        };
        let keyed: Vec<f64> = out.iter().map(mean_score).collect();
        if keyed.iter().all(|v| v.is_finite()) {
            let mut order: Vec<usize> = (0..out.len()).collect();
            order.sort_by(|&a, &b| keyed[a].total_cmp(&keyed[b]));
            out = order.into_iter().map(|j| out[j].clone()).collect();
        }
    }
    Ok(out)
}

/// Covariate-adjusted size-weighted primary estimate. `psi` is keyed by
/// panel position (one row per entry of `panel.clusters`).
pub fn covariate_adjusted_estimate(panel: &ExperimentPanel, psi: &[Vec<f64>]) -> Result<CovariateAdjustment> {
    if psi.len() != panel.g() {
        return Err(Error::validation(format!("psi has {} rows for {} clusters", psi.len(), panel.g())));
    }
    let view = arm_view(panel, Effect::Primary, EstimateOptions::default())?;
    let tuples = tuple_indices(panel, &view.index)?;
    let rows: Vec<Vec<f64>> = view.index.iter().map(|&i| psi[i].clone()).collect();
    let mut adj = covariate_adjustment_core(&view.data, &tuples, &rows)?;
    adj.psi = psi.to_vec();
    Ok(adj)
}

/// Per-cluster mean of a unit-level quantity over sampled units, as a
/// one-column `psi`.
pub fn psi_unit_mean(panel: &ExperimentPanel, f: impl Fn(&UnitRecord) -> f64) -> Vec<Vec<f64>> {
    panel
        .clusters
        .iter()
        .map(|c| vec![mean(c.sampled_units().map(&f)).unwrap_or(0.0)])
        .collect()
}

/// `psi_g = (N_g^p1, N_g^p2, ...)`.
pub fn psi_size_powers(panel: &ExperimentPanel, powers: &[i32]) -> Vec<Vec<f64>> {
    panel
        .clusters
        .iter()
        .map(|c| powers.iter().map(|&p| (c.n_g as f64).powi(p)).collect())
        .collect()
}
