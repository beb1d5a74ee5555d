//! Unit-level (weighted) least squares of `Y` on `(1, Z, L)`, with
//! `L = 1{treated cluster} (1 - Z)`, optional stratum fixed effects and
//! heteroskedasticity- or cluster-robust standard errors.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::panel::{DesignMode, ExperimentPanel};
use crate::{Error, Result};

/// Above this many groups, fixed effects are absorbed by a within
/// transformation instead of explicit dummies.
pub const MAX_DUMMY_GROUPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    Unweighted,
    /// `1 / M_g`.
    InvM,
    /// `N_g / M_g`.
    NOverM,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeType {
    #[default]
    HcRobust,
    Cluster,
    Hc2Cluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegressionSpec {
    #[serde(default)]
    pub weights: WeightScheme,
    #[serde(default)]
    pub fixed_effects: bool,
    #[serde(default)]
    pub se_type: SeType,
    /// Small-sample factor: `n / (n - p)` for HC, `G / (G - 1)` for cluster.
    #[serde(default)]
    pub hc1: bool,
}

/// Unit-level regression inputs. `cluster` and `group` are dense indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegressionData {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub l: Vec<f64>,
    pub weight: Vec<f64>,
    pub cluster: Vec<usize>,
    pub group: Option<Vec<usize>>,
    pub group_names: Vec<String>,
}

impl RegressionData {
    /// Sampled units of `panel`, in panel order. Groups come from the tuple
    /// or stratum labels when present.
    pub fn from_panel(panel: &ExperimentPanel, weights: WeightScheme) -> Result<Self> {
        let mut data = RegressionData::default();
        let labels: Option<BTreeMap<String, String>> = panel.tuple_structure.as_ref().and_then(|ts| match ts.mode {
            DesignMode::SmallStrata => Some(
                ts.tuples
                    .iter()
                    .enumerate()
                    .flat_map(|(j, t)| t.iter().map(move |id| (id.clone(), format!("t{j:06}"))))
                    .collect(),
            ),
            DesignMode::LargeStrata => Some(ts.large_strata.clone()),
            DesignMode::Complete => None,
        });
        let mut group_ids: BTreeMap<String, usize> = BTreeMap::new();
        if let Some(map) = &labels {
            for s in map.values() {
                let next = group_ids.len();
                group_ids.entry(s.clone()).or_insert(next);
            }
            // Re-number in label order.
            for (i, v) in group_ids.values_mut().enumerate() {
                *v = i;
            }
            data.group_names = group_ids.keys().cloned().collect();
        }
        let mut groups = Vec::new();
        for (ci, c) in panel.clusters.iter().enumerate() {
            let m = c.m_g();
            if m == 0 {
                continue;
            }
            let w = match weights {
                WeightScheme::Unweighted => 1.0,
                WeightScheme::InvM => 1.0 / m as f64,
                WeightScheme::NOverM => c.n_g as f64 / m as f64,
            };
            let group = match &labels {
                Some(map) => {
                    let s = map.get(&c.cluster_id).ok_or_else(|| {
                        Error::validation(format!("cluster {} has no stratum or tuple label", c.cluster_id))
                    })?;
                    Some(group_ids[s])
                }
                None => None,
            };
            for u in c.sampled_units() {
                let z = (c.treated && u.z) as u8 as f64;
                data.y.push(u.outcome);
                data.z.push(z);
                data.l.push(if c.treated { 1.0 - z } else { 0.0 });
                data.weight.push(w);
                data.cluster.push(ci);
                if let Some(gi) = group {
                    groups.push(gi);
                }
            }
        }
        if labels.is_some() {
            data.group = Some(groups);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionFit {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub se_beta1: f64,
    pub se_beta2: f64,
    pub columns: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Covariance of `coefficients`; with absorbed fixed effects only the
    /// `z` and `l` block is present.
    pub vcov: Vec<Vec<f64>>,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub spec: RegressionSpec,
    pub absorbed: bool,
}

fn dense_clusters(cluster: &[usize]) -> (Vec<usize>, usize) {
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    let out = cluster
        .iter()
        .map(|c| {
            let next = ids.len();
            *ids.entry(*c).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

/// Weighted least squares with sandwich standard errors.
pub fn ols_fit(data: &RegressionData, spec: RegressionSpec) -> Result<RegressionFit> {
    let n = data.len();
    if n == 0 {
        return Err(Error::validation("no observations to regress"));
    }
    if data.y.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("regression outcome contains non-finite values"));
    }
    let groups = if spec.fixed_effects {
        Some(
            data.group
                .as_ref()
                .ok_or_else(|| Error::validation("fixed effects need a stratum or tuple label on every cluster"))?,
        )
    } else {
        None
    };
    let n_groups = groups.map_or(0, |g| g.iter().max().map_or(0, |m| m + 1));
    let absorbed = spec.fixed_effects && n_groups > MAX_DUMMY_GROUPS;

    let mut columns = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut y = data.y.clone();
    if absorbed {
        let g = groups.expect("fixed effects");
        let mut zc = data.z.clone();
        let mut lc = data.l.clone();
        let mut sw = vec![0.0; n_groups];
        let mut means = vec![[0.0; 3]; n_groups];
        for i in 0..n {
            let w = data.weight[i];
            sw[g[i]] += w;
            means[g[i]][0] += w * data.y[i];
            means[g[i]][1] += w * data.z[i];
            means[g[i]][2] += w * data.l[i];
        }
        for i in 0..n {
            let s = sw[g[i]];
            y[i] -= means[g[i]][0] / s;
            zc[i] -= means[g[i]][1] / s;
            lc[i] -= means[g[i]][2] / s;
        }
        columns.extend(["z".to_string(), "l".to_string()]);
        cols.push(zc);
        cols.push(lc);
    } else {
        columns.extend(["intercept".to_string(), "z".to_string(), "l".to_string()]);
        cols.push(vec![1.0; n]);
        cols.push(data.z.clone());
        cols.push(data.l.clone());
        if let Some(g) = groups {
            for s in 1..n_groups {
                columns.push(format!("fe_{}", data.group_names.get(s).map_or(s.to_string(), |x| x.clone())));
                cols.push(g.iter().map(|&gi| (gi == s) as u8 as f64).collect());
            }
        }
    }
    let p = cols.len();
    let x = DMatrix::from_fn(n, p, |i, j| cols[j][i]);
    let sw: Vec<f64> = data.weight.iter().map(|w| w.sqrt()).collect();
    let xw = DMatrix::from_fn(n, p, |i, j| cols[j][i] * sw[i]);
    let yw = DVector::from_iterator(n, y.iter().zip(&sw).map(|(v, s)| v * s));
    let coef = linalg::least_squares(&xw, &yw, &columns)?;
    let resid: Vec<f64> = (0..n).map(|i| y[i] - (0..p).map(|j| x[(i, j)] * coef[j]).sum::<f64>()).collect();
    let bread = linalg::spd_inverse(&xw.tr_mul(&xw))?;

    let (cl, n_clusters) = dense_clusters(&data.cluster);
    let mut meat = DMatrix::zeros(p, p);
    match spec.se_type {
        SeType::HcRobust => {
            for i in 0..n {
                let s = data.weight[i] * resid[i];
                let xi = x.row(i);
                meat += (xi.transpose() * xi) * (s * s);
            }
            if spec.hc1 && n > p {
                meat *= n as f64 / (n - p) as f64;
            }
        }
        SeType::Cluster => {
            let mut scores = DMatrix::zeros(n_clusters, p);
            for i in 0..n {
                let s = data.weight[i] * resid[i];
                for j in 0..p {
                    scores[(cl[i], j)] += x[(i, j)] * s;
                }
            }
            meat = scores.tr_mul(&scores);
            if spec.hc1 && n_clusters > 1 {
                meat *= n_clusters as f64 / (n_clusters - 1) as f64;
            }
        }
        SeType::Hc2Cluster => {
            let mut members = vec![Vec::new(); n_clusters];
            for i in 0..n {
                members[cl[i]].push(i);
            }
            for idx in members {
                let m = idx.len();
                let xg = DMatrix::from_fn(m, p, |a, j| xw[(idx[a], j)]);
                let hgg = &xg * &bread * xg.transpose();
                let eig = SymmetricEigen::new(DMatrix::identity(m, m) - hgg);
                let inv_sqrt = eig.eigenvalues.map(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 });
                let adj = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
                let eg = DVector::from_iterator(m, idx.iter().map(|&i| resid[i] * sw[i]));
                let score = xg.transpose() * (adj * eg);
                meat += &score * score.transpose();
            }
            if spec.hc1 && n_clusters > 1 {
                meat *= n_clusters as f64 / (n_clusters - 1) as f64;
            }
        }
    }
    let vcov = &bread * meat * &bread;
    let (iz, il) = if absorbed { (0, 1) } else { (1, 2) };
    let alpha = if absorbed {
        let wsum: f64 = data.weight.iter().sum();
        let wmean = |v: &[f64]| v.iter().zip(&data.weight).map(|(a, w)| a * w).sum::<f64>() / wsum;
        wmean(&data.y) - coef[0] * wmean(&data.z) - coef[1] * wmean(&data.l)
    } else {
        coef[0]
    };
    Ok(RegressionFit {
        alpha,
        beta1: coef[iz],
        beta2: coef[il],
        se_beta1: vcov[(iz, iz)].max(0.0).sqrt(),
        se_beta2: vcov[(il, il)].max(0.0).sqrt(),
        columns,
        coefficients: coef.iter().copied().collect(),
        vcov: (0..p).map(|i| (0..p).map(|j| vcov[(i, j)]).collect()).collect(),
        n_obs: n,
        n_clusters,
        spec,
        absorbed,
    })
}

/// Regression of the panel's sampled outcomes on `(1, Z, L)`.
pub fn ols_inference(panel: &ExperimentPanel, spec: RegressionSpec) -> Result<RegressionFit> {
    let data = RegressionData::from_panel(panel, spec.weights)?;
    ols_fit(&data, spec)
}

/// Cluster-robust variance of the primary-effect slope on the `sqrt(G)`
/// scale, `G * Var(beta1)`.
pub fn cluster_robust_v(fit: &RegressionFit) -> Result<f64> {
    if fit.spec.se_type == SeType::HcRobust {
        return Err(Error::config("cluster_robust_v needs a fit with cluster standard errors"));
    }
    Ok(fit.n_clusters as f64 * fit.se_beta1 * fit.se_beta1)
}
