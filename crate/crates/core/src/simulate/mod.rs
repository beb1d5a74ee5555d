//! Monte Carlo harness: the outcome model, the simulation design menu and
//! the design-by-design grid of MSE ratios and rejection rates.

mod designs;
mod dgp;
mod grid;

pub use designs::{effect_data, first_stage, observed, realize, second_stage, DesignKind, DesignPair, Realization, Structure};
pub use dgp::{
    generate_population, optimal_index_first_stage, true_estimand, DgpConfig, Model, NoiseParameterization,
    OutcomeParams, Population, ARMS,
};
pub use grid::{
    aggregate, mse_ratio, run_mc_grid, run_replications, CellKey, Draw, McCell, McRaw, McTable, SimConfig, TableKind,
};

pub use crate::estimate::Weighting;
