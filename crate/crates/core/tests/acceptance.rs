mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{affine, brute_force_means, random_panel, wls_identity_gap, worked_panel};
use twostage_core::estimate::{arm_view, point_estimates, tuple_indices, Effect, Estimand};
use twostage_core::randomize::{assign_panel, match_tuples, DesignConfig};
use twostage_core::report::Method;
use twostage_core::simulate::{
    aggregate, run_replications, DesignKind, DesignPair, DgpConfig, McRaw, Model, SimConfig, TableKind,
};
use twostage_core::variance::{design_variance, small_strata_core, TauSpec};
use twostage_core::{ClusterRecord, ExperimentPanel};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn homogeneous(g: usize) -> DgpConfig {
    DgpConfig {
        model: Model::Homogeneous,
        g,
        ..Default::default()
    }
}

fn pair(first: DesignKind, second: DesignKind) -> DesignPair {
    DesignPair::new(first, second)
}

fn column(raw: &McRaw, pair: DesignPair, estimand: Estimand, method: Method) -> Vec<f64> {
    let j = raw
        .cells
        .iter()
        .position(|c| c.pair == pair && c.estimand == estimand && c.method == method)
        .expect("cell present");
    raw.draws.iter().map(|d| d[j].theta).collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn wls_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..25u64 {
        let g = 4 + 2 * (seed as usize % 9);
        worst = worst.max(wls_identity_gap(&random_panel(1000 + seed, g)));
    }
    check(worst <= 1e-10, format!("max relative gap {worst:.2e} over 25 panels"))
}

fn brute_force() -> Outcome {
    let ((mp, tp), (ms, ts)) = brute_force_means();
    let gap = (mp - tp).abs().max((ms - ts).abs());
    check(gap <= 1e-12, format!("E[theta_p1 hat] = {mp:.15}, theta_p1 = {tp:.15}; max gap {gap:.1e}"))
}

fn worked_variance() -> Outcome {
    let panel = worked_panel();
    let view = arm_view(&panel, Effect::Primary, Default::default()).map_err(|e| e.to_string())?;
    let tuples = tuple_indices(&panel, &view.index).map_err(|e| e.to_string())?;
    let p = small_strata_core(&view.data.y, &view.data.treated, &tuples, 0.5).map_err(|e| e.to_string())?;
    // Hand values: treated means 3, 5; control means 1, 2.
    let expected = [4.0, 1.5, 1.0, 0.25, 15.0, 2.0, 6.5, 2.75];
    let got = [p.gamma1, p.gamma0, p.sigma2_1, p.sigma2_0, p.rho11, p.rho00, p.rho10, p.v];
    let ok = expected.iter().zip(&got).all(|(a, b)| (a - b).abs() < 1e-12);
    check(
        ok,
        format!(
            "Gamma = ({}, {}), sigma2 = ({}, {}), rho = ({}, {}, {}), V1 = {}",
            got[0], got[1], got[2], got[3], got[4], got[5], got[6], got[7]
        ),
    )
}

fn variance_consistency() -> Outcome {
    let dgp = DgpConfig {
        n_min: 10,
        n_max: 20,
        ..homogeneous(2000)
    };
    let p = pair(DesignKind::MtA, DesignKind::C);
    let mut cfg = SimConfig::new(dgp, vec![p], 2000, 41);
    cfg.estimands = vec![Estimand::ThetaP1];
    cfg.methods = vec![Method::Adjusted];
    let raw = run_replications(&cfg).map_err(|e| e.to_string())?;
    let t = aggregate(&cfg, &raw);
    let c = &t.cells[0];
    let rel = (c.mean_v - c.mc_var).abs() / c.mc_var;
    check(
        rel <= 0.05,
        format!("mean V1 = {:.4}, MC var of sqrt(G) theta = {:.4}, relative gap {:.3}", c.mean_v, c.mc_var, rel),
    )
}

fn null_calibration() -> Outcome {
    let pairs = vec![
        pair(DesignKind::S2, DesignKind::S2),
        pair(DesignKind::S4O, DesignKind::MtC),
        pair(DesignKind::MtC, DesignKind::MtC),
    ];
    let mut cfg = SimConfig::new(homogeneous(200), pairs, 1000, 7);
    cfg.methods = vec![Method::Adjusted];
    let raw = run_replications(&cfg).map_err(|e| e.to_string())?;
    let t = aggregate(&cfg, &raw);
    let rates: Vec<String> = t
        .cells
        .iter()
        .map(|c| format!("{}/{} {} {:.3}", c.first, c.second, c.estimand, c.value))
        .collect();
    let ok = t.cells.len() == 12 && t.cells.iter().all(|c| (0.03..=0.07).contains(&c.value));
    check(ok, rates.join(", "))
}

fn mse_ratio() -> Outcome {
    let mut cfg = SimConfig::new(homogeneous(200), vec![pair(DesignKind::MtC, DesignKind::MtC)], 1000, 11);
    cfg.estimands = vec![Estimand::ThetaP1];
    cfg.methods = vec![Method::Adjusted];
    cfg.table = TableKind::MseRatio;
    let raw = run_replications(&cfg).map_err(|e| e.to_string())?;
    let t = aggregate(&cfg, &raw);
    let c = t
        .cells
        .iter()
        .find(|c| c.first == DesignKind::MtC)
        .ok_or("missing MT-C cell")?;
    check(
        (0.07..=0.16).contains(&c.value),
        format!("MSE(MT-C/MT-C) / MSE(C/C) = {:.4} (mc se {:.4})", c.value, c.mc_se),
    )
}

fn comparator_pathologies() -> Outcome {
    let mut cfg = SimConfig::new(homogeneous(200), vec![pair(DesignKind::S4O, DesignKind::C)], 1000, 13);
    cfg.estimands = vec![Estimand::ThetaP2];
    cfg.methods = vec![Method::OlsCluster, Method::OlsRobust];
    let raw = run_replications(&cfg).map_err(|e| e.to_string())?;
    let t = aggregate(&cfg, &raw);
    let rate = |m: Method| t.cells.iter().find(|c| c.method == m).map(|c| c.value).unwrap_or(f64::NAN);
    let (cl, rb) = (rate(Method::OlsCluster), rate(Method::OlsRobust));
    check(cl <= 0.01 && rb >= 0.10, format!("OLS cluster {cl:.3}, OLS robust {rb:.3}"))
}

fn covariate_gain() -> Outcome {
    let p = pair(DesignKind::MtC, DesignKind::C);
    let mut cfg = SimConfig::new(homogeneous(200), vec![p], 1000, 17);
    cfg.estimands = vec![Estimand::ThetaP2];
    cfg.methods = vec![Method::Adjusted, Method::CovariateAdjusted];
    let raw = run_replications(&cfg).map_err(|e| e.to_string())?;
    let plain = column(&raw, p, Estimand::ThetaP2, Method::Adjusted);
    let adj = column(&raw, p, Estimand::ThetaP2, Method::CovariateAdjusted);
    let (mp, ma) = (mean(&plain), mean(&adj));
    let d: Vec<f64> = plain.iter().zip(&adj).map(|(x, y)| (x - mp).powi(2) - (y - ma).powi(2)).collect();
    let md = mean(&d);
    let r = d.len() as f64;
    let se = (d.iter().map(|x| (x - md).powi(2)).sum::<f64>() / (r - 1.0) / r).sqrt();
    let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
    check(
        md > 2.0 * se,
        format!(
            "var(theta_p2) = {:.3e}, var(adjusted) = {:.3e}, difference {:.3e} = {:.1} MC SE",
            var(&plain, mp),
            var(&adj, ma),
            md,
            md / se
        ),
    )
}

fn property_suite() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    let estimates = |p: &ExperimentPanel| {
        let e = point_estimates(p).unwrap();
        Estimand::ALL.map(|x| e.get(x))
    };
    let v = |p: &ExperimentPanel, e: Estimand| design_variance(p, e, &TauSpec::Sbr, Default::default()).unwrap().raw_v;
    let mut failures = Vec::new();
    for seed in 0..50u64 {
        let panel = random_panel(seed, 4 * (1 + seed as usize % 5));
        let shifted = affine(&panel, 3.5 - seed as f64, 1.0);
        let scaled = affine(&panel, 0.0, 2.5);
        let (e0, e1, e2) = (estimates(&panel), estimates(&shifted), estimates(&scaled));
        for i in 0..4 {
            if !close(e0[i], e1[i]) {
                failures.push(format!("location, seed {seed}, estimand {i}"));
            }
            if !close(2.5 * e0[i], e2[i]) {
                failures.push(format!("scale, seed {seed}, estimand {i}"));
            }
        }
        let vp = v(&panel, Estimand::ThetaP1);
        if !close(vp, v(&shifted, Estimand::ThetaP1)) {
            failures.push(format!("V1 location, seed {seed}"));
        }
        for e in Estimand::ALL {
            if !close(6.25 * v(&panel, e), v(&scaled, e)) {
                failures.push(format!("V scale, seed {seed}, {e}"));
            }
        }
    }
    for (g, k, l) in [(12, 2, 1), (12, 3, 1), (12, 4, 3), (30, 5, 2)] {
        let scores: Vec<f64> = (0..g).map(|i| ((i * 7) % g) as f64).collect();
        let m = match_tuples(&scores, k, l, 5).unwrap();
        let mut seen = vec![0; g];
        for t in &m.tuples {
            seen.iter_mut().enumerate().for_each(|(i, s)| *s += t.contains(&i) as usize);
            if t.len() != k || t.iter().filter(|&&i| m.treated[i]).count() != l {
                failures.push(format!("tuple shape g={g} k={k} l={l}"));
            }
        }
        if m.tuples.len() != g / k || seen.iter().any(|&s| s != 1) || m != match_tuples(&scores, k, l, 5).unwrap() {
            failures.push(format!("tuple partition g={g} k={k} l={l}"));
        }
    }
    let clusters: Vec<ClusterRecord> = (0..20)
        .map(|i| {
            let mut c = ClusterRecord::new(format!("k{i:02}"), 4, false);
            c.covariates = vec![i as f64 / 20.0];
            c
        })
        .collect();
    let config: DesignConfig = serde_json::from_str(
        r#"{"first_stage": {"mechanism": "matched_tuples", "k": 2, "l": 1, "score": {"covariate": 1}},
            "second_stage": {"mechanism": "complete", "pi2": 0.5}}"#,
    )
    .unwrap();
    if assign_panel(clusters.clone(), &config, 3).unwrap().manifest != assign_panel(clusters, &config, 3).unwrap().manifest {
        failures.push("assignment determinism".into());
    }
    let mut cfg = SimConfig::new(homogeneous(40), vec![pair(DesignKind::MtC, DesignKind::S4)], 20, 99);
    cfg.dgp.n_min = 6;
    cfg.dgp.n_max = 12;
    let a = run_replications(&cfg).unwrap();
    let b = run_replications(&cfg).unwrap();
    if a.draws.iter().flatten().zip(b.draws.iter().flatten()).any(|(x, y)| x.theta.to_bits() != y.theta.to_bits()) {
        failures.push("simulation determinism".into());
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "50 panels x (location, scale), tuple invariants, seeded determinism".into()
        } else {
            failures.join("; ")
        },
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 algebraic identity", wls_identity),
        ("2 brute-force unbiasedness", brute_force),
        ("3 worked variance value", worked_variance),
        ("4 variance consistency", variance_consistency),
        ("5 null calibration", null_calibration),
        ("6 MSE ratio", mse_ratio),
        ("7 comparator pathologies", comparator_pathologies),
        ("8 covariate adjustment gain", covariate_gain),
        ("9 property suite", property_suite),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  criterion {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  criterion {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
