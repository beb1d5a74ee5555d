#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use twostage_core::estimate::{point_estimates, Estimand};
use twostage_core::regress::{ols_inference, WeightScheme};
use twostage_core::report::Method;
use twostage_core::{ClusterRecord, ExperimentPanel, TupleStructure, UnitRecord};

/// Matched-pairs panel with `g` clusters (even), sizes `N_g` in 2..=12 and an
/// even number `M_g <= N_g` of sampled units, half of them treated inside
/// treated clusters.
pub fn random_panel(seed: u64, g: usize) -> ExperimentPanel {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut clusters = Vec::with_capacity(g);
    let mut tuples = Vec::new();
    for pair in 0..g / 2 {
        let treated_slot = rng.random_range(0..2);
        let ids = [format!("g{:02}", 2 * pair), format!("g{:02}", 2 * pair + 1)];
        for (slot, id) in ids.iter().enumerate() {
            let treated = slot == treated_slot;
            let n = rng.random_range(2..=12usize);
            let m = 2 * rng.random_range(1..=n / 2);
            let shift = rng.random_range(-1.0..1.0);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut sampled = vec![false; n];
            let mut z = vec![false; n];
            for (rank, &i) in order.iter().enumerate() {
                sampled[i] = rank < m;
                if treated {
                    z[i] = rank < m / 2 || (rank >= m && rank < m + (n / 2 - m / 2));
                }
            }
            let units = (0..n)
                .map(|i| {
                    let y = shift + rng.random_range(-2.0..2.0) + if z[i] { 0.7 } else { 0.0 };
                    let mut u = UnitRecord::new(format!("u{i}"), y, z[i]);
                    u.sampled = sampled[i];
                    u.covariates = vec![rng.random_range(0.0..1.0)];
                    u
                })
                .collect();
            let mut c = ClusterRecord::new(id.clone(), n, treated).with_units(units);
            c.covariates = vec![rng.random_range(0.0..1.0)];
            clusters.push(c);
        }
        tuples.push(ids.to_vec());
    }
    ExperimentPanel::new(clusters, 0.5, 0.5).with_tuples(TupleStructure::small_strata(tuples, 2, 1))
}

/// Largest relative gap between the point estimates and the matching
/// weighted least-squares slopes.
pub fn wls_identity_gap(panel: &ExperimentPanel) -> f64 {
    let est = point_estimates(panel).unwrap();
    let mut worst: f64 = 0.0;
    for e in Estimand::ALL {
        let spec = Method::OlsRobust.regression_spec(e, WeightScheme::Unweighted).unwrap();
        let fit = ols_inference(panel, spec).unwrap();
        let slope = match e {
            Estimand::ThetaP1 | Estimand::ThetaP2 => fit.beta1,
            _ => fit.beta2,
        };
        let target = est.get(e);
        worst = worst.max((slope - target).abs() / target.abs().max(1.0));
    }
    worst
}

/// Applies `y -> a + b y` to every outcome.
pub fn affine(panel: &ExperimentPanel, a: f64, b: f64) -> ExperimentPanel {
    let mut p = panel.clone();
    for c in &mut p.clusters {
        for u in &mut c.units {
            u.outcome = a + b * u.outcome;
        }
    }
    p
}

/// Potential outcomes `(y00, y_treated, y_spill)` for a fixed 4-cluster
/// table with sizes 2, 3, 2 and 4, matched as {0, 1} and {2, 3}.
pub fn brute_force_table() -> Vec<Vec<(f64, f64, f64)>> {
    vec![
        vec![(1.0, 2.5, 1.5), (0.2, 3.0, 0.1)],
        vec![(2.0, 2.2, 2.9), (-1.0, 4.0, 0.0), (0.5, 1.0, 1.25)],
        vec![(3.0, 6.0, 3.5), (1.5, 2.0, 2.0)],
        vec![(0.0, 1.0, 0.5), (2.5, 2.0, 3.0), (-0.5, 0.75, 0.0), (1.0, 3.5, 1.5)],
    ]
}

fn subsets(n: usize, r: usize) -> Vec<Vec<bool>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == r)
        .map(|m| (0..n).map(|i| m >> i & 1 == 1).collect())
        .collect()
}

/// Enumerates every first- and second-stage assignment of the brute-force
/// table and returns `(mean of theta_p1 hat, finite-sample theta_p1)`, and the
/// same pair for `theta_s1`. Each first-stage draw has probability 1/4 and
/// second-stage draws are uniform given the first stage.
pub fn brute_force_means() -> ((f64, f64), (f64, f64)) {
    let table = brute_force_table();
    let g = table.len();
    let mut mean_p = 0.0;
    let mut mean_s = 0.0;
    for first in 0..4u32 {
        let treated: Vec<bool> = vec![first & 1 == 0, first & 1 == 1, first & 2 == 0, first & 2 == 2];
        let options: Vec<Vec<Vec<bool>>> = table
            .iter()
            .zip(&treated)
            .map(|(units, &t)| if t { subsets(units.len(), units.len() / 2) } else { vec![vec![false; units.len()]] })
            .collect();
        let total: usize = options.iter().map(Vec::len).product();
        let (mut sum_p, mut sum_s) = (0.0, 0.0);
        for draw in 0..total {
            let mut rest = draw;
            let mut clusters = Vec::new();
            for (c, units) in table.iter().enumerate() {
                let z = &options[c][rest % options[c].len()];
                rest /= options[c].len();
                let records = units
                    .iter()
                    .zip(z)
                    .enumerate()
                    .map(|(i, (&(y00, yt, ys), &zi))| {
                        let y = if !treated[c] { y00 } else if zi { yt } else { ys };
                        UnitRecord::new(format!("u{i}"), y, zi)
                    })
                    .collect();
                clusters.push(ClusterRecord::new(format!("c{c}"), units.len(), treated[c]).with_units(records));
            }
            let tuples = vec![vec!["c0".into(), "c1".into()], vec!["c2".into(), "c3".into()]];
            let panel =
                ExperimentPanel::new(clusters, 0.5, 0.5).with_tuples(TupleStructure::small_strata(tuples, 2, 1));
            let est = point_estimates(&panel).unwrap();
            sum_p += est.theta_p1;
            sum_s += est.theta_s1;
        }
        mean_p += sum_p / total as f64 / 4.0;
        mean_s += sum_s / total as f64 / 4.0;
    }
    let avg = |f: &dyn Fn(&(f64, f64, f64)) -> f64, u: &Vec<(f64, f64, f64)>| u.iter().map(f).sum::<f64>() / u.len() as f64;
    let truth_p = table.iter().map(|u| avg(&|x| x.1, u) - avg(&|x| x.0, u)).sum::<f64>() / g as f64;
    let truth_s = table.iter().map(|u| avg(&|x| x.2, u) - avg(&|x| x.0, u)).sum::<f64>() / g as f64;
    ((mean_p, truth_p), (mean_s, truth_s))
}

/// Four clusters of two fully sampled units; tuples {c1, c2} and {c3, c4};
/// c1 and c3 treated.
pub fn worked_panel() -> ExperimentPanel {
    let unit = |id: &str, y: f64, z: bool| UnitRecord::new(id, y, z);
    let clusters = vec![
        ClusterRecord::new("c1", 2, true).with_units(vec![unit("u1", 3.0, true), unit("u2", 1.0, false)]),
        ClusterRecord::new("c2", 2, false).with_units(vec![unit("u1", 0.5, false), unit("u2", 1.5, false)]),
        ClusterRecord::new("c3", 2, true).with_units(vec![unit("u1", 5.0, true), unit("u2", 3.0, false)]),
        ClusterRecord::new("c4", 2, false).with_units(vec![unit("u1", 2.5, false), unit("u2", 1.5, false)]),
    ];
    let tuples = vec![vec!["c1".to_string(), "c2".to_string()], vec!["c3".to_string(), "c4".to_string()]];
    ExperimentPanel::new(clusters, 0.5, 0.5).with_tuples(TupleStructure::small_strata(tuples, 2, 1))
}

/// Kolmogorov-Smirnov distance between `p` and the uniform distribution.
pub fn ks_uniform(p: &[f64]) -> f64 {
    let mut s = p.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max)
}
