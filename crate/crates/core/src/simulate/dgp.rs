use rand::seq::index::sample;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::estimate::{Effect, Estimand, Weighting};
use crate::rng::{self, domain};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    #[default]
    Homogeneous,
    Heterogeneous,
}

/// How the two Gaussian noise parameters (0.1 and 10) are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseParameterization {
    #[default]
    Variance,
    Sd,
}

/// Potential-outcome arms, in the order `(0, 0)`, `(0, pi2)`, `(1, pi2)`.
pub const ARMS: usize = 3;

fn default_g() -> usize {
    200
}
fn default_half() -> f64 {
    0.5
}
fn default_one() -> f64 {
    1.0
}
fn default_n_min() -> usize {
    50
}
fn default_n_max() -> usize {
    150
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    #[serde(default)]
    pub model: Model,
    /// `tau`: primary minus spillover mean.
    #[serde(default)]
    pub tau_effect: f64,
    /// `omega`: spillover mean minus pure control mean.
    #[serde(default)]
    pub omega_effect: f64,
    #[serde(default)]
    pub mu00: f64,
    #[serde(default = "default_g")]
    pub g: usize,
    #[serde(default = "default_half")]
    pub pi1: f64,
    #[serde(default = "default_half")]
    pub pi2: f64,
    /// `M_g / N_g`; sampled units are a uniform subset of size
    /// `max(2, floor(fraction * N_g))`.
    #[serde(default = "default_one")]
    pub sampling_fraction: f64,
    #[serde(default = "default_n_min")]
    pub n_min: usize,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default)]
    pub noise_parameterization: NoiseParameterization,
    /// Multiplies the outcome noise term.
    #[serde(default = "default_one")]
    pub noise_scale: f64,
    #[serde(default)]
    pub alpha: Option<[f64; ARMS]>,
    #[serde(default)]
    pub beta: Option<[f64; ARMS]>,
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Replaces `25 / 3` in the size-weighted first-stage index
    /// `n (c + n / 100) - offset * n`.
    #[serde(default)]
    pub size_index_offset: Option<f64>,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            model: Model::Homogeneous,
            tau_effect: 0.0,
            omega_effect: 0.0,
            mu00: 0.0,
            g: default_g(),
            pi1: 0.5,
            pi2: 0.5,
            sampling_fraction: 1.0,
            n_min: default_n_min(),
            n_max: default_n_max(),
            noise_parameterization: NoiseParameterization::Variance,
            noise_scale: 1.0,
            alpha: None,
            beta: None,
            gamma: None,
            size_index_offset: None,
        }
    }
}

/// Outcome-equation coefficients per arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeParams {
    pub mu: [f64; ARMS],
    pub alpha: [f64; ARMS],
    pub beta: [f64; ARMS],
    pub gamma: f64,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g < 4 {
            return Err(Error::config(format!("g = {} is too small", self.g)));
        }
        for (name, p) in [("pi1", self.pi1), ("pi2", self.pi2)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::config(format!("{name} = {p} must lie in (0, 1)")));
            }
        }
        if !(self.sampling_fraction > 0.0 && self.sampling_fraction <= 1.0) {
            return Err(Error::config(format!(
                "sampling_fraction = {} must lie in (0, 1]",
                self.sampling_fraction
            )));
        }
        if self.n_min < 2 || self.n_max < self.n_min {
            return Err(Error::config(format!(
                "cluster sizes need 2 <= n_min <= n_max (got {}..{})",
                self.n_min, self.n_max
            )));
        }
        if self.noise_scale.is_nan() || self.noise_scale < 0.0 {
            return Err(Error::config("noise_scale must be non-negative"));
        }
        Ok(())
    }

    pub fn params(&self) -> OutcomeParams {
        let (alpha, beta) = match self.model {
            Model::Homogeneous => ([1.0; ARMS], [1.0; ARMS]),
            Model::Heterogeneous => ([1.0, 0.5, 2.0], [1.0, 0.5, 2.0]),
        };
        let mu = [
            self.mu00,
            self.mu00 + self.omega_effect,
            self.mu00 + self.omega_effect + self.tau_effect,
        ];
        OutcomeParams {
            mu,
            alpha: self.alpha.unwrap_or(alpha),
            beta: self.beta.unwrap_or(beta),
            gamma: self.gamma.unwrap_or(0.01),
        }
    }

    fn noise_sd(&self, param: f64) -> f64 {
        match self.noise_parameterization {
            NoiseParameterization::Variance => param.sqrt(),
            NoiseParameterization::Sd => param,
        }
    }
}

/// True value of an estimand. The covariate terms have mean zero given the
/// cluster size and the size term has the same coefficient in every arm,
/// so both weightings reduce to differences of the arm intercepts.
pub fn true_estimand(cfg: &DgpConfig, estimand: Estimand) -> f64 {
    let p = cfg.params();
    match estimand.effect() {
        Effect::Primary => p.mu[2] - p.mu[0],
        Effect::Spillover => p.mu[1] - p.mu[0],
    }
}

/// One population draw in struct-of-arrays form. Units of cluster `g` occupy
/// `offset[g]..offset[g + 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Population {
    pub c: Vec<f64>,
    pub n: Vec<usize>,
    pub offset: Vec<usize>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    /// Potential outcomes per arm, indexed like [`ARMS`].
    pub y: [Vec<f64>; ARMS],
    pub sampled: Vec<bool>,
    /// Offset override for the size-weighted first-stage index.
    pub size_index_offset: Option<f64>,
}

impl Population {
    pub fn g(&self) -> usize {
        self.n.len()
    }

    pub fn units(&self, g: usize) -> std::ops::Range<usize> {
        self.offset[g]..self.offset[g + 1]
    }

    /// `x1 / (x2 + 0.1)`, the second-stage matching index.
    pub fn unit_index(&self, i: usize) -> f64 {
        self.x1[i] / (self.x2[i] + 0.1)
    }

    /// First-stage index of cluster `g` for `weighting`.
    pub fn cluster_index(&self, g: usize, weighting: Weighting) -> f64 {
        match (weighting, self.size_index_offset) {
            (Weighting::Size, Some(off)) => {
                let n = self.n[g] as f64;
                n * (self.c[g] + n / 100.0) - off * n
            }
            _ => optimal_index_first_stage(self.c[g], self.n[g], weighting),
        }
    }
}

/// `c + n / 100` (equal weighting) or `n (c + n / 100) - 25 n / 3` (size
/// weighting).
pub fn optimal_index_first_stage(c: f64, n: usize, weighting: Weighting) -> f64 {
    let n = n as f64;
    match weighting {
        Weighting::Equal => c + n / 100.0,
        Weighting::Size => n * (c + n / 100.0) - 25.0 * n / 3.0,
    }
}

/// Draws population `rep` under `seed`.
pub fn generate_population(cfg: &DgpConfig, seed: u64, rep: u64) -> Result<Population> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, domain::POPULATION, rep);
    let p = cfg.params();
    let unif = Uniform::new(0.0, 1.0).expect("valid range");
    let sizes = Uniform::new_inclusive(cfg.n_min, cfg.n_max).expect("valid range");
    let u_dist = Normal::new(0.0, cfg.noise_sd(0.1)).map_err(|e| Error::config(e.to_string()))?;
    let e_dist = Normal::new(0.0, cfg.noise_sd(10.0) * cfg.noise_scale).map_err(|e| Error::config(e.to_string()))?;

    let mut pop = Population {
        size_index_offset: cfg.size_index_offset,
        ..Default::default()
    };
    pop.offset.push(0);
    for _ in 0..cfg.g {
        let c = unif.sample(&mut rng);
        let n = sizes.sample(&mut rng);
        pop.c.push(c);
        pop.n.push(n);
        let nf = n as f64;
        let sigma = c * (nf - 100.0) / 100.0;
        for _ in 0..n {
            let x1 = nf * u_dist.sample(&mut rng) / 100.0;
            let x2 = unif.sample(&mut rng);
            let eps = e_dist.sample(&mut rng);
            let ratio = x1 / (x2 + 0.1);
            for a in 0..ARMS {
                pop.y[a].push(p.mu[a] + p.alpha[a] * ratio + p.beta[a] * (c - 0.5) + p.gamma * (nf - 100.0) + sigma * eps);
            }
            pop.x1.push(x1);
            pop.x2.push(x2);
        }
        pop.offset.push(pop.x1.len());
    }
    pop.sampled = vec![cfg.sampling_fraction >= 1.0; pop.x1.len()];
    if cfg.sampling_fraction < 1.0 {
        let mut srng = rng::stream(seed, domain::SAMPLING, rep);
        for g in 0..cfg.g {
            let n = pop.n[g];
            let m = ((cfg.sampling_fraction * n as f64).floor() as usize).clamp(2, n);
            let start = pop.offset[g];
            for i in sample(&mut srng, n, m) {
                pop.sampled[start + i] = true;
            }
        }
    }
    Ok(pop)
}
