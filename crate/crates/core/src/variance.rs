//! Design-based variance estimators and the adjusted t-test.
//!
//! `v` is always on the scale of `Var(sqrt(G) * (theta_hat - theta))`; the
//! standard error of the estimate is `sqrt(v / G)`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::estimate::{
    adjusted_residual_values, adjusted_values, arm_view, covariate_adjustment_core, tuple_indices, Effect,
    EffectData, Estimand, EstimateOptions, Weighting,
};
use crate::panel::{DesignMode, ExperimentPanel};
use crate::{Error, Result};

/// Raw variance estimates below this value are floored.
pub const V_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    V1,
    V2,
    V3,
    V4,
    Vcr,
    V2Adj,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::V1 => "v1",
            EstimatorKind::V2 => "v2",
            EstimatorKind::V3 => "v3",
            EstimatorKind::V4 => "v4",
            EstimatorKind::Vcr => "vcr",
            EstimatorKind::V2Adj => "v2_adj",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceEstimate {
    pub v: f64,
    pub raw_v: f64,
    pub se: f64,
    pub kind: EstimatorKind,
    pub effect: Effect,
    pub g: usize,
    pub floored: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl VarianceEstimate {
    pub fn new(raw_v: f64, g: usize, kind: EstimatorKind, effect: Effect) -> Result<Self> {
        if !raw_v.is_finite() {
            return Err(Error::numeric(format!("{kind} variance estimate is not finite ({raw_v})")));
        }
        let floored = raw_v < V_FLOOR;
        let v = raw_v.max(V_FLOOR);
        Ok(VarianceEstimate {
            v,
            raw_v,
            se: (v / g as f64).sqrt(),
            kind,
            effect,
            g,
            floored,
            warnings: Vec::new(),
        })
    }
}

/// Intermediate quantities of the pairs-of-pairs estimator. Suffix `1`
/// refers to treated clusters (`h = pi2`), `0` to control clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmallStrataParts {
    pub gamma1: f64,
    pub gamma0: f64,
    pub sigma2_1: f64,
    pub sigma2_0: f64,
    pub rho11: f64,
    pub rho00: f64,
    pub rho10: f64,
    pub v: f64,
}

/// Pairs-of-pairs estimator on cluster-level `values`. `tuples` index into
/// `values` and are paired consecutively as (1, 2), (3, 4), ...; with an odd
/// count the last tuple is left out of the within-arm cross products only.
pub fn small_strata_core(values: &[f64], treated: &[bool], tuples: &[Vec<usize>], pi1: f64) -> Result<SmallStrataParts> {
    let n = tuples.len();
    if n < 2 {
        return Err(Error::validation(format!(
            "pairs-of-pairs variance needs at least 2 tuples, got {n}"
        )));
    }
    let k = tuples[0].len();
    let l = tuples[0].iter().filter(|&&i| treated[i]).count();
    let mut s1 = Vec::with_capacity(n);
    let mut s0 = Vec::with_capacity(n);
    for (j, t) in tuples.iter().enumerate() {
        let lj = t.iter().filter(|&&i| treated[i]).count();
        if t.len() != k || lj != l {
            return Err(Error::validation(format!(
                "tuple {j} has size {} with {lj} treated; expected size {k} with {l} treated",
                t.len()
            )));
        }
        let (mut a, mut b) = (0.0, 0.0);
        for &i in t {
            if treated[i] {
                a += values[i];
            } else {
                b += values[i];
            }
        }
        s1.push(a);
        s0.push(b);
    }
    if l == 0 || l == k {
        return Err(Error::validation("every tuple needs both treated and control clusters"));
    }
    let nf = n as f64;
    let (k1, k0) = (l as f64, (k - l) as f64);
    let gamma1 = s1.iter().sum::<f64>() / (nf * k1);
    let gamma0 = s0.iter().sum::<f64>() / (nf * k0);
    let (mut ss1, mut ss0) = (0.0, 0.0);
    for t in tuples {
        for &i in t {
            if treated[i] {
                ss1 += (values[i] - gamma1).powi(2);
            } else {
                ss0 += (values[i] - gamma0).powi(2);
            }
        }
    }
    let sigma2_1 = ss1 / (nf * k1);
    let sigma2_0 = ss0 / (nf * k0);
    let (mut r11, mut r00) = (0.0, 0.0);
    for j in 0..n / 2 {
        r11 += s1[2 * j] * s1[2 * j + 1];
        r00 += s0[2 * j] * s0[2 * j + 1];
    }
    let rho11 = 2.0 / nf * r11 / (k1 * k1);
    let rho00 = 2.0 / nf * r00 / (k0 * k0);
    let rho10 = s1.iter().zip(&s0).map(|(a, b)| a * b).sum::<f64>() / (nf * k1 * k0);

    let v1n_1 = sigma2_1 - (rho11 - gamma1 * gamma1);
    let v1n_0 = sigma2_0 - (rho00 - gamma0 * gamma0);
    let v2n_11 = rho11 - gamma1 * gamma1;
    let v2n_00 = rho00 - gamma0 * gamma0;
    let v2n_10 = rho10 - gamma1 * gamma0;
    let v = v1n_1 / pi1 + v1n_0 / (1.0 - pi1) + v2n_11 + v2n_00 - 2.0 * v2n_10;
    Ok(SmallStrataParts {
        gamma1,
        gamma0,
        sigma2_1,
        sigma2_0,
        rho11,
        rho00,
        rho10,
        v,
    })
}

/// Large-strata estimator on cluster-level `values`. `strata` gives a
/// stratum index per cluster and `tau` one value per stratum index.
pub fn large_strata_core(values: &[f64], treated: &[bool], strata: &[usize], tau: &[f64], pi1: f64) -> Result<f64> {
    let ns = strata.iter().max().map_or(0, |m| m + 1);
    let g = values.len() as f64;
    let mut cnt = vec![[0usize; 2]; ns];
    let mut sum = vec![[0.0; 2]; ns];
    let (mut sq, mut tot, mut arm_n) = ([0.0; 2], [0.0; 2], [0usize; 2]);
    for ((&y, &t), &s) in values.iter().zip(treated).zip(strata) {
        let a = t as usize;
        cnt[s][a] += 1;
        sum[s][a] += y;
        sq[a] += y * y;
        tot[a] += y;
        arm_n[a] += 1;
    }
    let short: Vec<usize> = (0..ns)
        .filter(|&s| cnt[s][0] + cnt[s][1] > 0 && (cnt[s][0] < 2 || cnt[s][1] < 2))
        .collect();
    if !short.is_empty() {
        return Err(Error::validation(format!(
            "strata {short:?} need at least 2 treated and 2 control clusters"
        )));
    }
    let ybar1 = tot[1] / arm_n[1] as f64;
    let ybar0 = tot[0] / arm_n[0] as f64;
    let (mut m1sq, mut m0sq, mut between, mut tau_term) = (0.0, 0.0, 0.0, 0.0);
    for s in 0..ns {
        let gs = (cnt[s][0] + cnt[s][1]) as f64;
        if gs == 0.0 {
            continue;
        }
        let share = gs / g;
        let mu1 = sum[s][1] / cnt[s][1] as f64;
        let mu0 = sum[s][0] / cnt[s][0] as f64;
        m1sq += share * mu1 * mu1;
        m0sq += share * mu0 * mu0;
        let (d1, d0) = (mu1 - ybar1, mu0 - ybar0);
        between += share * (d1 - d0).powi(2);
        tau_term += tau[s] * share * (d1 / pi1 + d0 / (1.0 - pi1)).powi(2);
    }
    Ok((sq[1] / arm_n[1] as f64 - m1sq) / pi1 + (sq[0] / arm_n[0] as f64 - m0sq) / (1.0 - pi1) + between + tau_term)
}

/// Limiting imbalance scale `tau(s)` per stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TauSpec {
    /// Stratified block randomization: `tau = 0`.
    #[default]
    Sbr,
    /// Independent Bernoulli assignment: `tau = pi1 (1 - pi1)`.
    Bernoulli,
    Uniform(f64),
    PerStratum(BTreeMap<String, f64>),
}

impl TauSpec {
    pub fn resolve(&self, labels: &[String], pi1: f64) -> Result<Vec<f64>> {
        let max = pi1 * (1.0 - pi1);
        let out: Vec<f64> = match self {
            TauSpec::Sbr => vec![0.0; labels.len()],
            TauSpec::Bernoulli => vec![max; labels.len()],
            TauSpec::Uniform(t) => vec![*t; labels.len()],
            TauSpec::PerStratum(m) => labels
                .iter()
                .map(|s| m.get(s).copied().ok_or_else(|| Error::config(format!("no tau given for stratum {s:?}"))))
                .collect::<Result<_>>()?,
        };
        if let Some(t) = out.iter().find(|&&t| !(0.0..=max + 1e-12).contains(&t)) {
            return Err(Error::config(format!("tau = {t} outside [0, pi1 (1 - pi1)] = [0, {max}]")));
        }
        Ok(out)
    }
}

impl fmt::Display for TauSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauSpec::Sbr => f.write_str("sbr"),
            TauSpec::Bernoulli => f.write_str("bernoulli"),
            TauSpec::Uniform(t) => write!(f, "{t}"),
            TauSpec::PerStratum(_) => f.write_str("per_stratum"),
        }
    }
}

fn kind_for(weighting: Weighting, small: bool) -> EstimatorKind {
    match (small, weighting) {
        (true, Weighting::Equal) => EstimatorKind::V1,
        (true, Weighting::Size) => EstimatorKind::V2,
        (false, Weighting::Equal) => EstimatorKind::V3,
        (false, Weighting::Size) => EstimatorKind::V4,
    }
}

fn values_for(data: &EffectData, weighting: Weighting) -> Vec<f64> {
    match weighting {
        Weighting::Equal => data.y.clone(),
        Weighting::Size => adjusted_values(data),
    }
}

/// V1 (equal weighting) or V2 (size weighting) for a matched-tuples panel.
pub fn v_hat_small_strata(
    panel: &ExperimentPanel,
    effect: Effect,
    weighting: Weighting,
    opts: EstimateOptions,
) -> Result<VarianceEstimate> {
    let view = arm_view(panel, effect, opts)?;
    let tuples = tuple_indices(panel, &view.index)?;
    let values = values_for(&view.data, weighting);
    let parts = small_strata_core(&values, &view.data.treated, &tuples, panel.pi1)?;
    let mut est = VarianceEstimate::new(parts.v, view.data.len(), kind_for(weighting, true), effect)?;
    if tuples.len() % 2 == 1 {
        est.warnings.push(format!(
            "odd number of tuples ({}); the last tuple is left out of the within-arm pair products",
            tuples.len()
        ));
    }
    if !view.dropped.is_empty() {
        est.warnings.push(format!("dropped clusters without spillover units: {}", view.dropped.join(", ")));
    }
    Ok(est)
}

/// V3 (equal weighting) or V4 (size weighting) for a stratified panel. A
/// panel without strata labels is treated as one stratum.
pub fn v_hat_large_strata(
    panel: &ExperimentPanel,
    effect: Effect,
    weighting: Weighting,
    tau: &TauSpec,
    opts: EstimateOptions,
) -> Result<VarianceEstimate> {
    let view = arm_view(panel, effect, opts)?;
    let labels: Vec<String> = match panel.tuple_structure.as_ref() {
        Some(ts) if ts.mode == DesignMode::LargeStrata => view
            .index
            .iter()
            .map(|&i| {
                let id = &panel.clusters[i].cluster_id;
                ts.large_strata
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::validation(format!("cluster {id} has no stratum label")))
            })
            .collect::<Result<_>>()?,
        Some(ts) if ts.mode == DesignMode::SmallStrata => {
            return Err(Error::validation("large-strata variance requested for a matched-tuples panel"))
        }
        _ => vec!["all".to_string(); view.index.len()],
    };
    let mut names: Vec<String> = labels.clone();
    names.sort();
    names.dedup();
    let strata: Vec<usize> = labels.iter().map(|s| names.binary_search(s).expect("present")).collect();
    let tau = tau.resolve(&names, panel.pi1)?;
    let values = values_for(&view.data, weighting);
    let v = large_strata_core(&values, &view.data.treated, &strata, &tau, panel.pi1)?;
    let mut est = VarianceEstimate::new(v, view.data.len(), kind_for(weighting, false), effect)?;
    if !view.dropped.is_empty() {
        est.warnings.push(format!("dropped clusters without spillover units: {}", view.dropped.join(", ")));
    }
    Ok(est)
}

/// Variance estimator matching the panel's design: V1/V2 for matched tuples,
/// V3/V4 otherwise.
pub fn design_variance(
    panel: &ExperimentPanel,
    estimand: Estimand,
    tau: &TauSpec,
    opts: EstimateOptions,
) -> Result<VarianceEstimate> {
    let small = panel.tuple_structure.as_ref().is_some_and(|t| t.mode == DesignMode::SmallStrata);
    if small {
        v_hat_small_strata(panel, estimand.effect(), estimand.weighting(), opts)
    } else {
        v_hat_large_strata(panel, estimand.effect(), estimand.weighting(), tau, opts)
    }
}

/// Variance of the covariate-adjusted size-weighted primary estimator.
pub fn covariate_adjusted_variance(panel: &ExperimentPanel, psi: &[Vec<f64>], beta_hat: &[f64]) -> Result<VarianceEstimate> {
    if psi.len() != panel.g() {
        return Err(Error::validation(format!("psi has {} rows for {} clusters", psi.len(), panel.g())));
    }
    let view = arm_view(panel, Effect::Primary, EstimateOptions::default())?;
    let tuples = tuple_indices(panel, &view.index)?;
    let rows: Vec<Vec<f64>> = view.index.iter().map(|&i| psi[i].clone()).collect();
    let values = adjusted_residual_values(&view.data, &rows, beta_hat);
    let parts = small_strata_core(&values, &view.data.treated, &tuples, panel.pi1)?;
    VarianceEstimate::new(parts.v, view.data.len(), EstimatorKind::V2Adj, Effect::Primary)
}

/// Adjusted estimate and its variance in one pass over cluster-level data.
pub fn covariate_adjusted_core(
    data: &EffectData,
    tuples: &[Vec<usize>],
    psi: &[Vec<f64>],
    pi1: f64,
) -> Result<(f64, f64)> {
    let adj = covariate_adjustment_core(data, tuples, psi)?;
    let values = adjusted_residual_values(data, psi, &adj.beta_hat);
    let parts = small_strata_core(&values, &data.treated, tuples, pi1)?;
    Ok((adj.theta_p2_adj, parts.v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestResult {
    pub theta0: f64,
    pub tstat: f64,
    pub pvalue: f64,
    pub reject: bool,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub alpha: f64,
}

/// Two-sided normal test of `theta = theta0` and the matching confidence
/// interval, given `v` on the `sqrt(G)` scale.
pub fn adjusted_t_test(theta_hat: f64, v: &VarianceEstimate, g: usize, theta0: f64, alpha: f64) -> Result<TestResult> {
    normal_test(theta_hat, (v.v / g as f64).sqrt(), theta0, alpha)
}

/// Normal test from a standard error.
pub fn normal_test(theta_hat: f64, se: f64, theta0: f64, alpha: f64) -> Result<TestResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    if !(se > 0.0 && se.is_finite()) {
        return Err(Error::numeric(format!("cannot test with standard error {se}")));
    }
    let normal = Normal::standard();
    let crit = normal.inverse_cdf(1.0 - alpha / 2.0);
    let tstat = (theta_hat - theta0) / se;
    let pvalue = (2.0 * normal.cdf(-tstat.abs())).min(1.0);
    Ok(TestResult {
        theta0,
        tstat,
        pvalue,
        reject: tstat.abs() > crit,
        ci_lo: theta_hat - crit * se,
        ci_hi: theta_hat + crit * se,
        alpha,
    })
}
