//! Assignment, estimation and inference for two-stage randomized experiments.
//!
//! Clusters are randomized to a treated fraction first, then units inside
//! treated clusters are randomized to treatment. The crate covers the
//! covariate-adaptive designs for both stages (complete, stratified block,
//! matched tuples), the primary and spillover effect estimators with their
//! design-based variance estimators, regression comparators, and a seeded
//! Monte Carlo harness.

mod error;
mod linalg;

pub mod estimate;
pub mod io;
pub mod panel;
pub mod randomize;
pub mod regress;
pub mod report;
pub mod rng;
pub mod simulate;
pub mod variance;

pub use error::{Error, Result};
pub use panel::{
    validate_panel, ClusterRecord, DesignMode, ExperimentPanel, Rounding, TupleStructure, UnitRecord,
    ValidationReport,
};
