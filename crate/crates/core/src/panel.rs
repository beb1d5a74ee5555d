//! Validated data model for a two-stage experiment.
//!
//! A panel holds one [`ClusterRecord`] per cluster. Each cluster carries its
//! true size `n_g` separately from the recorded units, so panels where only a
//! subset of units is sampled (`M_g < N_g`) are represented directly. The
//! cluster-level assignment is stored as a flag: a treated cluster has target
//! treated fraction `pi2`, a control cluster has fraction zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Rounding applied to `pi2 * N` when fixing the number of treated units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    Floor,
    Ceil,
}

impl Rounding {
    /// Number of units treated when a fraction `frac` of `n` is targeted.
    pub fn treated_count(self, frac: f64, n: usize) -> usize {
        // Guard against 0.1 * 30 = 3.0000000000000004 style artifacts.
        let raw = frac * n as f64;
        let nearest = raw.round();
        let count = if (raw - nearest).abs() < 1e-9 {
            nearest
        } else {
            match self {
                Rounding::Floor => raw.floor(),
                Rounding::Ceil => raw.ceil(),
            }
        };
        (count.max(0.0) as usize).min(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit_id: String,
    /// Observed outcome. `NaN` when the outcome has not been recorded yet.
    pub outcome: f64,
    pub z: bool,
    pub covariates: Vec<f64>,
    pub sampled: bool,
    pub second_stage_stratum: Option<String>,
}

impl UnitRecord {
    pub fn new(unit_id: impl Into<String>, outcome: f64, z: bool) -> Self {
        UnitRecord {
            unit_id: unit_id.into(),
            outcome,
            z,
            covariates: Vec::new(),
            sampled: true,
            second_stage_stratum: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub cluster_id: String,
    /// True cluster size `N_g`.
    pub n_g: usize,
    /// Recorded units. Only those with `sampled = true` enter the analysis.
    pub units: Vec<UnitRecord>,
    /// Whether the cluster received the treated fraction `pi2`.
    pub treated: bool,
    pub covariates: Vec<f64>,
    /// Stratum or tuple label.
    pub stratum: Option<String>,
}

impl ClusterRecord {
    pub fn new(cluster_id: impl Into<String>, n_g: usize, treated: bool) -> Self {
        ClusterRecord {
            cluster_id: cluster_id.into(),
            n_g,
            units: Vec::new(),
            treated,
            covariates: Vec::new(),
            stratum: None,
        }
    }

    pub fn with_units(mut self, units: Vec<UnitRecord>) -> Self {
        self.units = units;
        self
    }

    pub fn sampled_units(&self) -> impl Iterator<Item = &UnitRecord> {
        self.units.iter().filter(|u| u.sampled)
    }

    /// `M_g`, the number of sampled units.
    pub fn m_g(&self) -> usize {
        self.sampled_units().count()
    }

    /// Treated fraction `H_g` given the experiment's `pi2`.
    pub fn h(&self, pi2: f64) -> f64 {
        if self.treated {
            pi2
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMode {
    /// Matched tuples: many strata of fixed size `k`.
    SmallStrata,
    /// A few large strata, complete randomization inside each.
    LargeStrata,
    /// Complete randomization across all clusters.
    Complete,
}

impl fmt::Display for DesignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DesignMode::SmallStrata => "small_strata",
            DesignMode::LargeStrata => "large_strata",
            DesignMode::Complete => "complete",
        };
        f.write_str(s)
    }
}

/// Partition of clusters into strata, as produced by the first-stage design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleStructure {
    /// Tuples of cluster ids, each of size `k` (small-strata mode).
    pub tuples: Vec<Vec<String>>,
    pub k: usize,
    pub l: usize,
    /// Categorical stratum label per cluster (large-strata mode).
    #[serde(default)]
    pub large_strata: BTreeMap<String, String>,
    pub mode: DesignMode,
    /// Matching score per cluster, used to order tuples before pairing them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, f64>>,
}

impl TupleStructure {
    pub fn small_strata(tuples: Vec<Vec<String>>, k: usize, l: usize) -> Self {
        TupleStructure {
            tuples,
            k,
            l,
            large_strata: BTreeMap::new(),
            mode: DesignMode::SmallStrata,
            scores: None,
        }
    }

    pub fn large_strata(labels: BTreeMap<String, String>) -> Self {
        TupleStructure {
            tuples: Vec::new(),
            k: 0,
            l: 0,
            large_strata: labels,
            mode: DesignMode::LargeStrata,
            scores: None,
        }
    }

    pub fn complete() -> Self {
        TupleStructure {
            tuples: Vec::new(),
            k: 0,
            l: 0,
            large_strata: BTreeMap::new(),
            mode: DesignMode::Complete,
            scores: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPanel {
    pub clusters: Vec<ClusterRecord>,
    pub pi1: f64,
    pub pi2: f64,
    #[serde(default)]
    pub tuple_structure: Option<TupleStructure>,
    #[serde(default)]
    pub rounding: Rounding,
}

impl ExperimentPanel {
    pub fn new(clusters: Vec<ClusterRecord>, pi1: f64, pi2: f64) -> Self {
        ExperimentPanel {
            clusters,
            pi1,
            pi2,
            tuple_structure: None,
            rounding: Rounding::Floor,
        }
    }

    pub fn with_tuples(mut self, tuples: TupleStructure) -> Self {
        self.tuple_structure = Some(tuples);
        self
    }

    pub fn g(&self) -> usize {
        self.clusters.len()
    }

    pub fn treated_clusters(&self) -> usize {
        self.clusters.iter().filter(|c| c.treated).count()
    }

    /// Index of each cluster id in `clusters`.
    pub fn cluster_index(&self) -> BTreeMap<&str, usize> {
        self.clusters
            .iter()
            .enumerate()
            .map(|(i, c)| (c.cluster_id.as_str(), i))
            .collect()
    }

    /// Applies `f` to every outcome. Used by invariance checks.
    pub fn map_outcomes(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.clusters {
            for u in &mut c.units {
                u.outcome = f(u.outcome);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DuplicateClusterId,
    TooFewClusters,
    MissingArm,
    ParameterRange,
    TreatedFraction,
    UnitCount,
    SampledUnitsFloor,
    NonFiniteOutcome,
    ControlClusterTreatedUnit,
    WithinClusterTreatedCount,
    DuplicateUnitId,
    TuplePartition,
    TupleSize,
    TupleTreatedCount,
    UnknownStratumCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub cluster_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, cluster_id: Option<&str>, message: String) {
        self.violations.push(Violation {
            kind,
            cluster_id: cluster_id.map(str::to_owned),
            message,
        });
    }

    /// Turns a failing report into an error listing every violation.
    pub fn into_result(self) -> crate::Result<Vec<String>> {
        if self.passed() {
            Ok(self.warnings)
        } else {
            let lines: Vec<String> = self.violations.iter().map(|v| v.message.clone()).collect();
            Err(crate::Error::Validation(format!(
                "panel failed validation:\n  {}",
                lines.join("\n  ")
            )))
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Checks every structural invariant of the panel. Violations are returned as
/// data; this function never fails.
pub fn validate_panel(panel: &ExperimentPanel) -> ValidationReport {
    use ViolationKind::*;
    let mut report = ValidationReport::default();

    if !(panel.pi1 > 0.0 && panel.pi1 < 1.0) {
        report.push(ParameterRange, None, format!("pi1 = {} is outside (0, 1)", panel.pi1));
    }
    if !(panel.pi2 > 0.0 && panel.pi2 <= 1.0) {
        report.push(ParameterRange, None, format!("pi2 = {} is outside (0, 1]", panel.pi2));
    }

    let mut seen = BTreeSet::new();
    for c in &panel.clusters {
        if !seen.insert(c.cluster_id.as_str()) {
            report.push(
                DuplicateClusterId,
                Some(&c.cluster_id),
                format!("cluster id {:?} appears more than once", c.cluster_id),
            );
        }
    }
    if panel.g() < 2 {
        report.push(TooFewClusters, None, format!("G = {} but at least 2 clusters are required", panel.g()));
    }
    let g1 = panel.treated_clusters();
    if g1 == 0 {
        report.push(MissingArm, None, "no treated clusters (G1 = 0)".into());
    }
    if g1 == panel.g() {
        report.push(MissingArm, None, "no control clusters (G0 = 0)".into());
    }

    for c in &panel.clusters {
        check_cluster(panel, c, &mut report);
    }

    if let Some(ts) = &panel.tuple_structure {
        check_tuples(panel, ts, &mut report);
    }
    report
}

fn check_cluster(panel: &ExperimentPanel, c: &ClusterRecord, report: &mut ValidationReport) {
    use ViolationKind::*;
    let id = Some(c.cluster_id.as_str());
    if c.units.len() > c.n_g {
        report.push(
            UnitCount,
            id,
            format!(
                "cluster {}: {} units recorded but n_g = {}",
                c.cluster_id,
                c.units.len(),
                c.n_g
            ),
        );
    }
    let m = c.m_g();
    if m < 2 {
        report.push(
            SampledUnitsFloor,
            id,
            format!("cluster {}: M_g = {} sampled units, at least 2 are required", c.cluster_id, m),
        );
    }
    let mut unit_ids = BTreeSet::new();
    for u in &c.units {
        if !unit_ids.insert(u.unit_id.as_str()) {
            report.push(
                DuplicateUnitId,
                id,
                format!("cluster {}: unit id {:?} repeated", c.cluster_id, u.unit_id),
            );
        }
        if u.sampled && !u.outcome.is_finite() {
            report.push(
                NonFiniteOutcome,
                id,
                format!("cluster {}: unit {} has a non-finite outcome", c.cluster_id, u.unit_id),
            );
        }
    }
    let treated_units = c.units.iter().filter(|u| u.z).count();
    if !c.treated && treated_units > 0 {
        report.push(
            ControlClusterTreatedUnit,
            id,
            format!("cluster {}: control cluster has {} treated units", c.cluster_id, treated_units),
        );
    }
    // The treated count is only checkable when every unit of the cluster is on file.
    if c.treated && c.units.len() == c.n_g {
        let expected = panel.rounding.treated_count(panel.pi2, c.n_g);
        if treated_units != expected {
            report.push(
                WithinClusterTreatedCount,
                id,
                format!(
                    "cluster {}: {} treated units but floor(pi2 * N_g) = {}",
                    c.cluster_id, treated_units, expected
                ),
            );
        }
    }
}

fn check_tuples(panel: &ExperimentPanel, ts: &TupleStructure, report: &mut ValidationReport) {
    use ViolationKind::*;
    let index = panel.cluster_index();
    match ts.mode {
        DesignMode::SmallStrata => {
            if ts.k < 2 || ts.l == 0 || ts.l >= ts.k {
                report.push(
                    ParameterRange,
                    None,
                    format!("tuple parameters k = {}, l = {} need k >= 2 and 0 < l < k", ts.k, ts.l),
                );
            } else if gcd(ts.k, ts.l) != 1 {
                report
                    .warnings
                    .push(format!("k = {} and l = {} are not coprime", ts.k, ts.l));
            }
            let mut covered = BTreeSet::new();
            for (j, tuple) in ts.tuples.iter().enumerate() {
                if tuple.len() != ts.k {
                    report.push(
                        TupleSize,
                        None,
                        format!("tuple {} has {} clusters, expected k = {}", j, tuple.len(), ts.k),
                    );
                }
                let mut treated = 0;
                for id in tuple {
                    match index.get(id.as_str()) {
                        Some(&i) => {
                            if panel.clusters[i].treated {
                                treated += 1;
                            }
                        }
                        None => report.push(
                            TuplePartition,
                            Some(id),
                            format!("tuple {} references unknown cluster {:?}", j, id),
                        ),
                    }
                    if !covered.insert(id.as_str()) {
                        report.push(
                            TuplePartition,
                            Some(id),
                            format!("cluster {:?} appears in more than one tuple", id),
                        );
                    }
                }
                if treated != ts.l {
                    report.push(
                        TupleTreatedCount,
                        None,
                        format!("tuple {}: tuple treated count {} != l = {}", j, treated, ts.l),
                    );
                }
            }
            for c in &panel.clusters {
                if !covered.contains(c.cluster_id.as_str()) {
                    report.push(
                        TuplePartition,
                        Some(&c.cluster_id),
                        format!("cluster {:?} is not in any tuple", c.cluster_id),
                    );
                }
            }
        }
        DesignMode::LargeStrata => {
            for c in &panel.clusters {
                if !ts.large_strata.contains_key(&c.cluster_id) {
                    report.push(
                        UnknownStratumCluster,
                        Some(&c.cluster_id),
                        format!("cluster {:?} has no stratum label", c.cluster_id),
                    );
                }
            }
            for id in ts.large_strata.keys() {
                if !index.contains_key(id.as_str()) {
                    report.push(
                        UnknownStratumCluster,
                        Some(id),
                        format!("stratum map references unknown cluster {:?}", id),
                    );
                }
            }
        }
        DesignMode::Complete => {}
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Four clusters of two fully sampled units; tuples {c1, c2} and {c3, c4};
    /// c1 and c3 treated. Treated-arm means 3 and 5, control-cluster means 1
    /// and 2, control-unit means inside treated clusters 1 and 3.
    pub fn worked_panel() -> ExperimentPanel {
        let unit = |id: &str, y: f64, z: bool| UnitRecord::new(id, y, z);
        let clusters = vec![
            ClusterRecord::new("c1", 2, true).with_units(vec![unit("u1", 3.0, true), unit("u2", 1.0, false)]),
            ClusterRecord::new("c2", 2, false).with_units(vec![unit("u1", 0.5, false), unit("u2", 1.5, false)]),
            ClusterRecord::new("c3", 2, true).with_units(vec![unit("u1", 5.0, true), unit("u2", 3.0, false)]),
            ClusterRecord::new("c4", 2, false).with_units(vec![unit("u1", 2.5, false), unit("u2", 1.5, false)]),
        ];
        let tuples = vec![
            vec!["c1".to_string(), "c2".to_string()],
            vec!["c3".to_string(), "c4".to_string()],
        ];
        ExperimentPanel::new(clusters, 0.5, 0.5).with_tuples(TupleStructure::small_strata(tuples, 2, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::worked_panel;
    use super::*;

    #[test]
    fn worked_panel_is_valid() {
        let report = validate_panel(&worked_panel());
        assert!(report.passed(), "{:?}", report.violations);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn tuple_with_two_treated_is_flagged() {
        let mut panel = worked_panel();
        panel.clusters[1].treated = true;
        panel.clusters[1].units[0].z = true;
        let report = validate_panel(&panel);
        assert!(report.has(ViolationKind::TupleTreatedCount));
        assert!(report
            .violations
            .iter()
            .any(|v| v.message.contains("tuple treated count")));
    }

    #[test]
    fn single_sampled_unit_is_flagged() {
        let mut panel = worked_panel();
        panel.clusters[2].units[1].sampled = false;
        let report = validate_panel(&panel);
        assert!(report.has(ViolationKind::SampledUnitsFloor));
    }

    #[test]
    fn missing_control_arm_is_flagged() {
        let mut panel = worked_panel();
        panel.tuple_structure = None;
        for c in &mut panel.clusters {
            c.treated = true;
        }
        let report = validate_panel(&panel);
        assert!(report.has(ViolationKind::MissingArm));
    }

    #[test]
    fn treated_count_uses_configured_rounding() {
        let mut panel = worked_panel();
        panel.tuple_structure = None;
        panel.pi2 = 0.6;
        // floor(0.6 * 2) = 1 matches the one treated unit per treated cluster.
        assert!(validate_panel(&panel).passed());
        panel.rounding = Rounding::Ceil;
        assert!(validate_panel(&panel).has(ViolationKind::WithinClusterTreatedCount));
    }

    #[test]
    fn non_coprime_tuple_parameters_only_warn() {
        let unit = |id: &str, z: bool| UnitRecord::new(id, 1.0, z);
        let mut clusters = Vec::new();
        for i in 0..4 {
            let treated = i < 2;
            clusters.push(
                ClusterRecord::new(format!("c{i}"), 2, treated)
                    .with_units(vec![unit("a", treated), unit("b", false)]),
            );
        }
        let tuples = vec![(0..4).map(|i| format!("c{i}")).collect()];
        let panel = ExperimentPanel::new(clusters, 0.5, 0.5).with_tuples(TupleStructure::small_strata(tuples, 4, 2));
        let report = validate_panel(&panel);
        assert!(report.passed(), "{:?}", report.violations);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn validation_is_idempotent() {
        let mut panel = worked_panel();
        panel.clusters[0].units[0].outcome = f64::NAN;
        let a = validate_panel(&panel);
        let b = validate_panel(&panel);
        assert_eq!(a, b);
        assert!(a.has(ViolationKind::NonFiniteOutcome));
    }

    #[test]
    fn rounding_counts() {
        assert_eq!(Rounding::Floor.treated_count(0.5, 5), 2);
        assert_eq!(Rounding::Ceil.treated_count(0.5, 5), 3);
        assert_eq!(Rounding::Floor.treated_count(0.1, 30), 3);
        assert_eq!(Rounding::Floor.treated_count(1.0 / 3.0, 7), 2);
    }
}
