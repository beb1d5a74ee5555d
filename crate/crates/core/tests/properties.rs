mod common;

use proptest::prelude::*;

use common::{affine, random_panel, wls_identity_gap};
use twostage_core::estimate::{point_estimates, Estimand};
use twostage_core::io::{parse_clusters, parse_units, write_clusters_to, write_units_to};
use twostage_core::randomize::match_tuples;
use twostage_core::variance::{design_variance, TauSpec};
use twostage_core::ExperimentPanel;

fn variances(panel: &ExperimentPanel) -> Vec<f64> {
    variances_of(panel, &Estimand::ALL)
}

fn variances_of(panel: &ExperimentPanel, estimands: &[Estimand]) -> Vec<f64> {
    estimands
        .iter()
        .map(|&e| design_variance(panel, e, &TauSpec::Sbr, Default::default()).unwrap().raw_v)
        .collect()
}

fn estimates(panel: &ExperimentPanel) -> Vec<f64> {
    let p = point_estimates(panel).unwrap();
    Estimand::ALL.iter().map(|&e| p.get(e)).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn estimates_match_weighted_regression(seed in any::<u64>(), half in 2usize..=10) {
        let panel = random_panel(seed, 2 * half);
        prop_assert!(wls_identity_gap(&panel) < 1e-10);
    }

    #[test]
    fn location_shift_leaves_estimates_and_variances(seed in any::<u64>(), quarter in 1usize..=5, a in -50.0f64..50.0) {
        let panel = random_panel(seed, 4 * quarter);
        let shifted = affine(&panel, a, 1.0);
        for (x, y) in estimates(&panel).into_iter().zip(estimates(&shifted)) {
            prop_assert!(close(x, y, 1e-9), "{x} vs {y}");
        }
        // Equal weighting only.
        let equal = [Estimand::ThetaP1, Estimand::ThetaS1];
        for (x, y) in variances_of(&panel, &equal).into_iter().zip(variances_of(&shifted, &equal)) {
            prop_assert!(close(x, y, 1e-8), "{x} vs {y}");
        }
    }

    #[test]
    fn scaling_multiplies_estimates_and_variances(seed in any::<u64>(), quarter in 1usize..=5, b in 0.1f64..10.0) {
        let panel = random_panel(seed, 4 * quarter);
        let scaled = affine(&panel, 0.0, b);
        for (x, y) in estimates(&panel).into_iter().zip(estimates(&scaled)) {
            prop_assert!(close(b * x, y, 1e-9));
        }
        for (x, y) in variances(&panel).into_iter().zip(variances(&scaled)) {
            prop_assert!(close(b * b * x, y, 1e-8));
        }
    }

    #[test]
    fn cluster_and_unit_order_does_not_matter(seed in any::<u64>(), quarter in 1usize..=5) {
        let panel = random_panel(seed, 4 * quarter);
        let mut permuted = panel.clone();
        permuted.clusters.reverse();
        for c in &mut permuted.clusters {
            c.units.rotate_left(1);
        }
        for (x, y) in estimates(&panel).into_iter().zip(estimates(&permuted)) {
            prop_assert!(close(x, y, 1e-12));
        }
        for (x, y) in variances(&panel).into_iter().zip(variances(&permuted)) {
            prop_assert!(close(x, y, 1e-12));
        }
    }

    #[test]
    fn csv_round_trip_preserves_the_panel(seed in any::<u64>(), half in 2usize..=8) {
        let panel = random_panel(seed, 2 * half);
        let mut cbuf = Vec::new();
        let mut ubuf = Vec::new();
        write_clusters_to(&mut cbuf, &panel.clusters, panel.pi2).unwrap();
        write_units_to(&mut ubuf, &panel.clusters).unwrap();
        let mut table = parse_clusters(cbuf.as_slice(), "clusters").unwrap();
        parse_units(ubuf.as_slice(), "units", &mut table.clusters).unwrap();
        prop_assert_eq!(table.pi2, Some(panel.pi2));
        prop_assert_eq!(&table.clusters, &panel.clusters);
    }

    #[test]
    fn matched_tuples_partition_the_clusters(
        scores in prop::collection::vec(-100.0f64..100.0, 1..20),
        k in 2usize..=4,
        seed in any::<u64>(),
    ) {
        let mut scores = scores;
        let g = scores.len() * k;
        scores = scores.iter().cycle().take(g).enumerate().map(|(i, s)| s + i as f64 * 1e-3).collect();
        let l = 1 + (seed as usize) % (k - 1);
        let m = match_tuples(&scores, k, l, seed).unwrap();
        prop_assert_eq!(m.tuples.len(), g / k);
        let mut seen = vec![0; g];
        for t in &m.tuples {
            prop_assert_eq!(t.len(), k);
            prop_assert_eq!(t.iter().filter(|&&i| m.treated[i]).count(), l);
            for &i in t {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(m, match_tuples(&scores, k, l, seed).unwrap());
    }
}
