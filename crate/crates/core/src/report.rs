//! End-to-end analysis of an assigned panel: point estimates, the
//! design-matched variance estimators and the regression comparators.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::estimate::{point_estimates_with, Estimand, EstimateOptions, Weighting};
use crate::panel::{validate_panel, DesignMode, ExperimentPanel, TupleStructure};
use crate::randomize::DesignManifest;
use crate::regress::{ols_inference, RegressionSpec, SeType, WeightScheme};
use crate::variance::{
    adjusted_t_test, covariate_adjusted_variance, design_variance, normal_test, TauSpec, VarianceEstimate,
};
use crate::estimate::covariate_adjusted_estimate;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Design-based variance (V1..V4) with normal critical values.
    Adjusted,
    OlsRobust,
    OlsCluster,
    OlsFeRobust,
    OlsFeCluster,
    /// Covariate-adjusted size-weighted primary estimator (matched tuples).
    CovariateAdjusted,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Adjusted,
        Method::OlsRobust,
        Method::OlsCluster,
        Method::OlsFeRobust,
        Method::OlsFeCluster,
        Method::CovariateAdjusted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Adjusted => "adjusted",
            Method::OlsRobust => "ols_robust",
            Method::OlsCluster => "ols_cluster",
            Method::OlsFeRobust => "ols_fe_robust",
            Method::OlsFeCluster => "ols_fe_cluster",
            Method::CovariateAdjusted => "covariate_adjusted",
        }
    }

    /// `(fixed_effects, se_type)` for the regression methods.
    pub fn regression(self) -> Option<(bool, SeType)> {
        match self {
            Method::OlsRobust => Some((false, SeType::HcRobust)),
            Method::OlsCluster => Some((false, SeType::Cluster)),
            Method::OlsFeRobust => Some((true, SeType::HcRobust)),
            Method::OlsFeCluster => Some((true, SeType::Cluster)),
            _ => None,
        }
    }

    /// Regression spec for `estimand`. Without fixed effects the weights
    /// reproduce the estimator (`1 / M_g` or `N_g / M_g`); fixed-effect fits
    /// use `fe_weights`.
    pub fn regression_spec(self, estimand: Estimand, fe_weights: WeightScheme) -> Option<RegressionSpec> {
        let (fixed_effects, se_type) = self.regression()?;
        let weights = if fixed_effects {
            fe_weights
        } else {
            match estimand.weighting() {
                Weighting::Equal => WeightScheme::InvM,
                Weighting::Size => WeightScheme::NOverM,
            }
        };
        Some(RegressionSpec {
            weights,
            fixed_effects,
            se_type,
            hc1: false,
        })
    }

    pub fn applies(self, matched: bool, estimand: Estimand) -> bool {
        self != Method::CovariateAdjusted || (matched && estimand == Estimand::ThetaP2)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub theta0: f64,
    pub tau: TauSpec,
    /// Use `G1 / G` for `pi1` even when a manifest is supplied.
    pub empirical_pi1: bool,
    pub allow_missing_spillover: bool,
    pub fe_weights: WeightScheme,
    /// Cluster covariate columns (1-based `c_<i>`) forming `psi` for the
    /// covariate-adjusted estimator.
    pub psi_columns: Vec<usize>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            methods: vec![Method::Adjusted],
            alpha: 0.05,
            theta0: 0.0,
            tau: TauSpec::Sbr,
            empirical_pi1: false,
            allow_missing_spillover: false,
            fe_weights: WeightScheme::Unweighted,
            psi_columns: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: Method,
    pub estimand: Estimand,
    pub theta_hat: f64,
    pub variance_estimator: String,
    pub v: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub tstat: f64,
    pub pvalue: f64,
    pub reject: bool,
    pub floored: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_spec: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub g: usize,
    pub g1: usize,
    pub g0: usize,
    pub pi1: f64,
    pub pi1_source: String,
    pub pi2: f64,
    pub design_mode: DesignMode,
    pub alpha: f64,
    pub theta0: f64,
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

/// Prepares `panel` for analysis: applies the manifest's tuple structure and
/// `pi1`, or falls back to the empirical treated fraction.
pub fn prepare_panel(
    mut panel: ExperimentPanel,
    manifest: Option<&DesignManifest>,
    empirical_pi1: bool,
) -> Result<(ExperimentPanel, String)> {
    let g1 = panel.treated_clusters();
    let empirical = g1 as f64 / panel.g().max(1) as f64;
    if let Some(m) = manifest {
        panel.tuple_structure = Some(m.tuple_structure());
        panel.pi2 = m.pi2;
        panel.rounding = m.rounding;
    } else if panel.tuple_structure.is_none() {
        let labels: Option<std::collections::BTreeMap<String, String>> = panel
            .clusters
            .iter()
            .map(|c| c.stratum.clone().map(|s| (c.cluster_id.clone(), s)))
            .collect();
        panel.tuple_structure = Some(match labels {
            Some(l) => TupleStructure::large_strata(l),
            None => TupleStructure::complete(),
        });
    }
    let source = match manifest {
        Some(m) if !empirical_pi1 => {
            panel.pi1 = m.pi1;
            "manifest"
        }
        _ if empirical_pi1 || manifest.is_none() => {
            if !empirical_pi1 {
                return Err(Error::config(
                    "no design manifest given; pass a manifest or request the empirical treated fraction",
                ));
            }
            panel.pi1 = empirical;
            "empirical"
        }
        _ => unreachable!(),
    };
    Ok((panel, source.to_string()))
}

fn row_from_variance(
    method: Method,
    estimand: Estimand,
    theta_hat: f64,
    v: &VarianceEstimate,
    opts: &AnalysisOptions,
    tau_spec: Option<String>,
) -> Result<ReportRow> {
    let t = adjusted_t_test(theta_hat, v, v.g, opts.theta0, opts.alpha)?;
    Ok(ReportRow {
        method,
        estimand,
        theta_hat,
        variance_estimator: v.kind.to_string(),
        v: v.v,
        se: v.se,
        ci: [t.ci_lo, t.ci_hi],
        tstat: t.tstat,
        pvalue: t.pvalue,
        reject: t.reject,
        floored: v.floored,
        tau_spec,
    })
}

/// Full analysis of an assigned panel with outcomes.
pub fn analyze(panel: &ExperimentPanel, pi1_source: &str, opts: &AnalysisOptions) -> Result<EstimateReport> {
    let validation = validate_panel(panel);
    let mut warnings = validation.clone().into_result()?;
    let est_opts = EstimateOptions {
        allow_missing_spillover: opts.allow_missing_spillover,
    };
    let estimates = point_estimates_with(panel, est_opts)?;
    let mode = panel.tuple_structure.as_ref().map_or(DesignMode::Complete, |t| t.mode);
    let mut rows = Vec::new();
    for &method in &opts.methods {
        match method {
            Method::Adjusted => {
                for e in Estimand::ALL {
                    let v = design_variance(panel, e, &opts.tau, est_opts)?;
                    warnings.extend(v.warnings.iter().map(|w| format!("{e}: {w}")));
                    let tau = (mode != DesignMode::SmallStrata).then(|| opts.tau.to_string());
                    rows.push(row_from_variance(method, e, estimates.get(e), &v, opts, tau)?);
                }
            }
            Method::CovariateAdjusted => {
                if opts.psi_columns.is_empty() {
                    return Err(Error::config("covariate adjustment needs at least one psi column"));
                }
                let psi: Vec<Vec<f64>> = panel
                    .clusters
                    .iter()
                    .map(|c| {
                        opts.psi_columns
                            .iter()
                            .map(|&i| {
                                c.covariates.get(i.wrapping_sub(1)).copied().filter(|v| v.is_finite()).ok_or_else(|| {
                                    Error::validation(format!("cluster {} has no finite c_{i}", c.cluster_id))
                                })
                            })
                            .collect::<Result<Vec<f64>>>()
                    })
                    .collect::<Result<_>>()?;
                let adj = covariate_adjusted_estimate(panel, &psi)?;
                let v = covariate_adjusted_variance(panel, &psi, &adj.beta_hat)?;
                rows.push(row_from_variance(method, Estimand::ThetaP2, adj.theta_p2_adj, &v, opts, None)?);
            }
            ols => {
                for e in Estimand::ALL {
                    let spec = ols.regression_spec(e, opts.fe_weights).expect("regression method");
                    let fit = ols_inference(panel, spec)?;
                    let (b, se) = match e.effect() {
                        crate::estimate::Effect::Primary => (fit.beta1, fit.se_beta1),
                        crate::estimate::Effect::Spillover => (fit.beta2, fit.se_beta2),
                    };
                    let t = normal_test(b, se, opts.theta0, opts.alpha)?;
                    let label = match spec.se_type {
                        SeType::HcRobust => "hc0",
                        SeType::Cluster => "cluster",
                        SeType::Hc2Cluster => "hc2_cluster",
                    };
                    rows.push(ReportRow {
                        method: ols,
                        estimand: e,
                        theta_hat: b,
                        variance_estimator: label.to_string(),
                        v: fit.n_clusters as f64 * se * se,
                        se,
                        ci: [t.ci_lo, t.ci_hi],
                        tstat: t.tstat,
                        pvalue: t.pvalue,
                        reject: t.reject,
                        floored: false,
                        tau_spec: None,
                    });
                }
            }
        }
    }
    warnings.dedup();
    let g1 = panel.treated_clusters();
    Ok(EstimateReport {
        g: panel.g(),
        g1,
        g0: panel.g() - g1,
        pi1: panel.pi1,
        pi1_source: pi1_source.to_string(),
        pi2: panel.pi2,
        design_mode: mode,
        alpha: opts.alpha,
        theta0: opts.theta0,
        rows,
        warnings,
    })
}

impl EstimateReport {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "G = {} (treated {}, control {}), pi1 = {} ({}), pi2 = {}, design = {}",
            self.g, self.g1, self.g0, self.pi1, self.pi1_source, self.pi2, self.design_mode
        );
        let level = format!("{:.0}% CI", 100.0 * (1.0 - self.alpha));
        let header = [
            "method", "estimand", "estimate", "variance", "se", &level, "t", "p-value", "reject",
        ];
        let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            table.push(vec![
                r.method.to_string(),
                r.estimand.to_string(),
                format!("{:.4}", r.theta_hat),
                format!("{}{}", r.variance_estimator, if r.floored { "*" } else { "" }),
                format!("{:.4}", r.se),
                format!("[{:.4}, {:.4}]", r.ci[0], r.ci[1]),
                format!("{:.3}", r.tstat),
                format!("{:.4}", r.pvalue),
                if r.reject { "yes".into() } else { "no".into() },
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|j| table.iter().map(|row| row[j].chars().count()).max().unwrap_or(0))
            .collect();
        for (i, row) in table.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, cell)| if j < 2 { format!("{cell:<w$}", w = widths[j]) } else { format!("{cell:>w$}", w = widths[j]) })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        if self.rows.iter().any(|r| r.floored) {
            out.push_str("* variance estimate floored at 1e-12\n");
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::fixtures::worked_panel;

    #[test]
    fn worked_panel_report() {
        let panel = worked_panel();
        let opts = AnalysisOptions {
            methods: vec![Method::Adjusted, Method::OlsRobust, Method::OlsCluster],
            ..Default::default()
        };
        let report = analyze(&panel, "manifest", &opts).unwrap();
        assert_eq!(report.rows.len(), 12);
        let p1 = &report.rows[0];
        assert_eq!(p1.estimand, Estimand::ThetaP1);
        assert!((p1.theta_hat - 2.5).abs() < 1e-12);
        assert!((p1.v - 2.75).abs() < 1e-12);
        assert_eq!(p1.variance_estimator, "v1");
        let text = report.to_text();
        assert!(text.contains("theta_p1"));
    }

    #[test]
    fn empirical_pi1_requires_flag_without_manifest() {
        let mut panel = worked_panel();
        panel.tuple_structure = None;
        assert!(prepare_panel(panel.clone(), None, false).is_err());
        let (p, src) = prepare_panel(panel, None, true).unwrap();
        assert_eq!(src, "empirical");
        assert_eq!(p.pi1, 0.5);
        assert_eq!(p.tuple_structure.unwrap().mode, DesignMode::Complete);
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("ols".parse::<Method>().is_err());
    }
}
