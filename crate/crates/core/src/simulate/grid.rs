use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::designs::{effect_data, realize, DesignKind, DesignPair, Realization, Structure};
use super::dgp::{generate_population, true_estimand, DgpConfig, Population};
use crate::estimate::{adjusted_values, theta, Effect, EffectData, Estimand, Weighting};
use crate::regress::{ols_fit, RegressionData, WeightScheme};
use crate::report::Method;
use crate::rng::{self, domain, StreamRng};
use crate::variance::{covariate_adjusted_core, large_strata_core, normal_test, small_strata_core, TauSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    #[default]
    Rejection,
    MseRatio,
}

fn all_estimands() -> Vec<Estimand> {
    Estimand::ALL.to_vec()
}
fn default_methods() -> Vec<Method> {
    vec![Method::Adjusted]
}
fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default)]
    pub dgp: DgpConfig,
    pub pairs: Vec<DesignPair>,
    #[serde(default = "all_estimands")]
    pub estimands: Vec<Estimand>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub table: TableKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Null value tested in every replication.
    #[serde(default)]
    pub theta0: f64,
    /// Denominator design for MSE ratios; defaults to C/C.
    #[serde(default)]
    pub baseline: Option<DesignPair>,
    /// Draw the population once and re-randomize only the assignment.
    #[serde(default)]
    pub fixed_population: bool,
    #[serde(default)]
    pub tau: TauSpec,
}

impl SimConfig {
    pub fn new(dgp: DgpConfig, pairs: Vec<DesignPair>, replications: usize, seed: u64) -> Self {
        SimConfig {
            dgp,
            pairs,
            estimands: all_estimands(),
            methods: default_methods(),
            replications,
            seed,
            table: TableKind::Rejection,
            alpha: 0.05,
            theta0: 0.0,
            baseline: None,
            fixed_population: false,
            tau: TauSpec::Sbr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::config("replications must be at least 1"));
        }
        if self.pairs.is_empty() {
            return Err(Error::config("no design pairs given"));
        }
        if self.estimands.is_empty() || self.methods.is_empty() {
            return Err(Error::config("need at least one estimand and one method"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha = {} must lie in (0, 1)", self.alpha)));
        }
        self.dgp.validate()
    }

    fn baseline_pair(&self) -> DesignPair {
        self.baseline.unwrap_or(DesignPair::new(DesignKind::C, DesignKind::C))
    }

    /// Cells evaluated per replication. For MSE tables the baseline pair is
    /// included even when not requested.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut pairs = self.pairs.clone();
        if self.table == TableKind::MseRatio && !pairs.contains(&self.baseline_pair()) {
            pairs.push(self.baseline_pair());
        }
        let mut out = Vec::new();
        for &pair in &pairs {
            for &estimand in &self.estimands {
                for &method in &self.methods {
                    if method.applies(pair.first.is_matched(), estimand) {
                        out.push(CellKey { pair, estimand, method });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub pair: DesignPair,
    pub estimand: Estimand,
    pub method: Method,
}

/// One replication's result for one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Draw {
    pub theta: f64,
    /// Variance estimate on the `sqrt(G)` scale.
    pub v: f64,
    pub reject: bool,
}

/// Per-replication draws, `draws[rep][cell]`.
#[derive(Debug, Clone, PartialEq)]
pub struct McRaw {
    pub cells: Vec<CellKey>,
    pub draws: Vec<Vec<Draw>>,
}

fn realization_for(
    pop: &Population,
    pair: DesignPair,
    weighting: Weighting,
    cfg: &SimConfig,
    rep: u64,
) -> Result<Realization> {
    let mut first = rng::stream(cfg.seed, domain::FIRST_STAGE, rep);
    let second_seed = rng::derive_seed(cfg.seed, rep);
    realize(pop, pair, weighting, cfg.dgp.pi1, cfg.dgp.pi2, &mut first, |g| -> StreamRng {
        rng::stream(second_seed, domain::SECOND_STAGE, g as u64)
    })
}

fn regression_data(pop: &Population, real: &Realization, weights: WeightScheme) -> RegressionData {
    let mut data = RegressionData::default();
    let groups: Vec<usize> = match &real.structure {
        Structure::Strata(s) => s.clone(),
        Structure::Tuples(t) => {
            let mut out = vec![0; pop.g()];
            for (j, tuple) in t.iter().enumerate() {
                for &g in tuple {
                    out[g] = j;
                }
            }
            out
        }
    };
    let mut grp = Vec::new();
    for g in 0..pop.g() {
        let sampled: Vec<usize> = pop.units(g).filter(|&i| pop.sampled[i]).collect();
        let m = sampled.len() as f64;
        let w = match weights {
            WeightScheme::Unweighted => 1.0,
            WeightScheme::InvM => 1.0 / m,
            WeightScheme::NOverM => pop.n[g] as f64 / m,
        };
        for i in sampled {
            let z = (real.treated[g] && real.z[i]) as u8 as f64;
            data.y.push(super::designs::observed(pop, real, g, i));
            data.z.push(z);
            data.l.push(if real.treated[g] { 1.0 - z } else { 0.0 });
            data.weight.push(w);
            data.cluster.push(g);
            grp.push(groups[g]);
        }
    }
    data.group = Some(grp);
    data
}

struct RepContext<'a> {
    cfg: &'a SimConfig,
    pop: &'a Population,
    rep: u64,
    realizations: BTreeMap<(DesignPair, Weighting), Realization>,
    effect_cache: BTreeMap<(DesignPair, Weighting, Effect), EffectData>,
}

impl RepContext<'_> {
    fn weighting_key(pair: DesignPair, w: Weighting) -> Weighting {
        if pair.first.uses_weighting() {
            w
        } else {
            Weighting::Equal
        }
    }

    fn realization(&mut self, pair: DesignPair, w: Weighting) -> Result<&Realization> {
        let key = (pair, Self::weighting_key(pair, w));
        if !self.realizations.contains_key(&key) {
            let r = realization_for(self.pop, pair, key.1, self.cfg, self.rep)?;
            self.realizations.insert(key, r);
        }
        Ok(&self.realizations[&key])
    }

    fn data(&mut self, pair: DesignPair, w: Weighting, effect: Effect) -> Result<EffectData> {
        let key = (pair, Self::weighting_key(pair, w), effect);
        if let Some(d) = self.effect_cache.get(&key) {
            return Ok(d.clone());
        }
        let real = self.realization(pair, w)?.clone();
        let d = effect_data(self.pop, &real, effect)?;
        self.effect_cache.insert(key, d.clone());
        Ok(d)
    }

    fn draw(&mut self, cell: CellKey) -> Result<Draw> {
        let (effect, weighting) = (cell.estimand.effect(), cell.estimand.weighting());
        let data = self.data(cell.pair, weighting, effect)?;
        let real = self.realization(cell.pair, weighting)?.clone();
        let g = data.len();
        let pi1 = self.cfg.dgp.pi1;
        let (theta_hat, v, se) = match cell.method {
            Method::Adjusted => {
                let values = match weighting {
                    Weighting::Equal => data.y.clone(),
                    Weighting::Size => adjusted_values(&data),
                };
                let v = match &real.structure {
                    Structure::Tuples(t) => small_strata_core(&values, &data.treated, t, pi1)?.v,
                    Structure::Strata(s) => {
                        let ns = s.iter().max().map_or(0, |m| m + 1);
                        let names: Vec<String> = (0..ns).map(|i| i.to_string()).collect();
                        let tau = self.cfg.tau.resolve(&names, pi1)?;
                        large_strata_core(&values, &data.treated, s, &tau, pi1)?
                    }
                };
                let v = v.max(crate::variance::V_FLOOR);
                (theta(&data, weighting)?, v, (v / g as f64).sqrt())
            }
            Method::CovariateAdjusted => {
                let Structure::Tuples(t) = &real.structure else {
                    return Err(Error::config("covariate adjustment needs a matched-tuples first stage"));
                };
                let psi: Vec<Vec<f64>> = (0..g)
                    .map(|c| {
                        let idx: Vec<usize> = self.pop.units(c).filter(|&i| self.pop.sampled[i]).collect();
                        vec![idx.iter().map(|&i| self.pop.unit_index(i)).sum::<f64>() / idx.len() as f64]
                    })
                    .collect();
                let (th, v) = covariate_adjusted_core(&data, t, &psi, pi1)?;
                let v = v.max(crate::variance::V_FLOOR);
                (th, v, (v / g as f64).sqrt())
            }
            ols => {
                let spec = ols.regression_spec(cell.estimand, WeightScheme::Unweighted).expect("ols method");
                let rd = regression_data(self.pop, &real, spec.weights);
                let fit = ols_fit(&rd, spec)?;
                let (b, se) = match effect {
                    Effect::Primary => (fit.beta1, fit.se_beta1),
                    Effect::Spillover => (fit.beta2, fit.se_beta2),
                };
                (b, g as f64 * se * se, se)
            }
        };
        let test = normal_test(theta_hat, se.max(1e-300), self.cfg.theta0, self.cfg.alpha)?;
        Ok(Draw {
            theta: theta_hat,
            v,
            reject: test.reject,
        })
    }
}

/// Runs every replication and returns the raw per-cell draws in replication
/// order.
pub fn run_replications(cfg: &SimConfig) -> Result<McRaw> {
    cfg.validate()?;
    let cells = cfg.cells();
    let fixed = if cfg.fixed_population {
        Some(generate_population(&cfg.dgp, cfg.seed, 0)?)
    } else {
        None
    };
    let draws = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|rep| {
            let owned;
            let pop = match &fixed {
                Some(p) => p,
                None => {
                    owned = generate_population(&cfg.dgp, cfg.seed, rep)?;
                    &owned
                }
            };
            let mut ctx = RepContext {
                cfg,
                pop,
                rep,
                realizations: BTreeMap::new(),
                effect_cache: BTreeMap::new(),
            };
            cells.iter().map(|&c| ctx.draw(c)).collect::<Result<Vec<Draw>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(McRaw { cells, draws })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub first: DesignKind,
    pub second: DesignKind,
    pub estimand: Estimand,
    pub method: Method,
    /// Rejection rate or MSE ratio, depending on the table kind.
    pub value: f64,
    pub mc_se: f64,
    pub truth: f64,
    pub mean_estimate: f64,
    pub mse: f64,
    /// Monte Carlo variance of `sqrt(G) * theta_hat`.
    pub mc_var: f64,
    /// Mean variance estimate on the same scale.
    pub mean_v: f64,
    pub rejection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McTable {
    pub kind: TableKind,
    pub replications: usize,
    pub g: usize,
    pub seed: u64,
    pub cells: Vec<McCell>,
}

fn summarize(cfg: &SimConfig, key: CellKey, draws: &[Draw]) -> McCell {
    let r = draws.len() as f64;
    let g = cfg.dgp.g as f64;
    let truth = true_estimand(&cfg.dgp, key.estimand);
    let mean_estimate = draws.iter().map(|d| d.theta).sum::<f64>() / r;
    let mse = draws.iter().map(|d| (d.theta - truth).powi(2)).sum::<f64>() / r;
    let mc_var = if draws.len() > 1 {
        g * draws.iter().map(|d| (d.theta - mean_estimate).powi(2)).sum::<f64>() / (r - 1.0)
    } else {
        0.0
    };
    let mean_v = draws.iter().map(|d| d.v).sum::<f64>() / r;
    let rejection = draws.iter().filter(|d| d.reject).count() as f64 / r;
    McCell {
        first: key.pair.first,
        second: key.pair.second,
        estimand: key.estimand,
        method: key.method,
        value: rejection,
        mc_se: (rejection * (1.0 - rejection) / r).sqrt(),
        truth,
        mean_estimate,
        mse,
        mc_var,
        mean_v,
        rejection,
    }
}

/// Ratio of mean squared errors with a delta-method standard error that
/// accounts for the shared replications.
pub fn mse_ratio(num: &[f64], den: &[f64]) -> (f64, f64) {
    let r = num.len() as f64;
    let a = num.iter().sum::<f64>() / r;
    let b = den.iter().sum::<f64>() / r;
    let ratio = a / b;
    if num.len() < 2 || b == 0.0 {
        return (ratio, 0.0);
    }
    let resid: Vec<f64> = num.iter().zip(den).map(|(x, y)| x - ratio * y).collect();
    let m = resid.iter().sum::<f64>() / r;
    let var = resid.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (r - 1.0);
    (ratio, (var / r).sqrt() / b)
}

pub fn aggregate(cfg: &SimConfig, raw: &McRaw) -> McTable {
    let column = |j: usize| -> Vec<Draw> { raw.draws.iter().map(|d| d[j]).collect() };
    let mut cells = Vec::new();
    let requested: Vec<usize> = (0..raw.cells.len())
        .filter(|&j| cfg.pairs.contains(&raw.cells[j].pair))
        .collect();
    for j in requested {
        let key = raw.cells[j];
        let draws = column(j);
        let mut cell = summarize(cfg, key, &draws);
        if cfg.table == TableKind::MseRatio {
            let base_key = CellKey {
                pair: cfg.baseline_pair(),
                ..key
            };
            let b = raw.cells.iter().position(|c| *c == base_key).expect("baseline cell evaluated");
            let base = column(b);
            let sq = |ds: &[Draw], t: f64| ds.iter().map(|d| (d.theta - t).powi(2)).collect::<Vec<f64>>();
            let (ratio, se) = mse_ratio(&sq(&draws, cell.truth), &sq(&base, cell.truth));
            cell.value = ratio;
            cell.mc_se = se;
        }
        cells.push(cell);
    }
    McTable {
        kind: cfg.table,
        replications: cfg.replications,
        g: cfg.dgp.g,
        seed: cfg.seed,
        cells,
    }
}

/// Runs the grid and aggregates it into a table.
pub fn run_mc_grid(cfg: &SimConfig) -> Result<McTable> {
    let raw = run_replications(cfg)?;
    Ok(aggregate(cfg, &raw))
}

impl McTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.cells {
            w.serialize(c).map_err(|e| Error::Csv {
                path: "<table>".into(),
                message: e.to_string(),
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv {
            path: "<table>".into(),
            message: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Text layout: one block per (estimand, method), first-stage designs as
    /// rows and second-stage designs as columns.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let label = match self.kind {
            TableKind::Rejection => "rejection rate",
            TableKind::MseRatio => "MSE ratio",
        };
        let mut blocks: BTreeMap<(Estimand, Method), Vec<&McCell>> = BTreeMap::new();
        for c in &self.cells {
            blocks.entry((c.estimand, c.method)).or_default().push(c);
        }
        for ((estimand, method), cells) in blocks {
            let mut firsts: Vec<DesignKind> = cells.iter().map(|c| c.first).collect();
            firsts.sort();
            firsts.dedup();
            let mut seconds: Vec<DesignKind> = cells.iter().map(|c| c.second).collect();
            seconds.sort();
            seconds.dedup();
            let _ = writeln!(out, "{estimand} / {method} ({label}, {} replications, G = {})", self.replications, self.g);
            let _ = write!(out, "{:<8}", "");
            for s in &seconds {
                let _ = write!(out, "{:>18}", s.name());
            }
            out.push('\n');
            for f in &firsts {
                let _ = write!(out, "{:<8}", f.name());
                for s in &seconds {
                    match cells.iter().find(|c| c.first == *f && c.second == *s) {
                        Some(c) => {
                            let _ = write!(out, "{:>18}", format!("{:.3} ({:.3})", c.value, c.mc_se));
                        }
                        None => {
                            let _ = write!(out, "{:>18}", "");
                        }
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}
