//! Comparison methods: per-record individual optimization and the indirect
//! ratebook that regresses its coefficients onto the features.

mod individual;
mod trees;

pub use individual::{
    default_rate_set, discrete_individual_optimize, golden_section_max, individual_optimize,
    interior_grid, record_objective, IndividualConfig, IndividualSolution, SearchMethod,
};
pub use trees::{fit_boosted, staged_mse, BoostConfig, BoostedTreeModel, RegressionTree};

use crate::error::Result;
use crate::models::Bounds;

/// Boosted regressor of individually optimized coefficients.
pub fn fit_indirect_ratebook(
    x: &[Vec<f64>],
    targets: &[f64],
    bounds: Bounds,
    config: &BoostConfig,
) -> Result<BoostedTreeModel> {
    fit_boosted(x, targets, bounds, config)
}

pub fn predict_indirect(model: &BoostedTreeModel, x: &[f64]) -> f64 {
    model.predict(x)
}
