use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Bounds, ConversionModel};
use crate::optimize::Quotes;
use crate::par;

/// Per-record score `(c − 1)·h·f(x, c·h) + λ·f(x, c·h)`.
pub fn record_objective(fmodel: &ConversionModel, base: f64, premium: f64, lambda: f64, c: f64) -> f64 {
    let f = fmodel.prob_from_base(base, c * premium);
    (c - 1.0) * premium * f + lambda * f
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    Grid,
    GridRefine,
    Discrete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndividualSolution {
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub method: SearchMethod,
    /// Sum of per-record scores at the chosen coefficients.
    pub objective: f64,
    pub margins: Vec<f64>,
    pub conversions: Vec<f64>,
}

impl IndividualSolution {
    fn assemble(
        quotes: &Quotes,
        fmodel: &ConversionModel,
        lambda: f64,
        method: SearchMethod,
        coefficients: Vec<f64>,
    ) -> Self {
        let mut margins = Vec::with_capacity(coefficients.len());
        let mut conversions = Vec::with_capacity(coefficients.len());
        let mut objective = 0.0;
        for (i, &c) in coefficients.iter().enumerate() {
            let h = quotes.premium[i];
            let f = fmodel.prob_from_base(quotes.base[i], c * h);
            margins.push((c - 1.0) * h * f);
            conversions.push(f);
            objective += record_objective(fmodel, quotes.base[i], h, lambda, c);
        }
        IndividualSolution {
            coefficients,
            lambda,
            method,
            objective,
            margins,
            conversions,
        }
    }

    /// `record_id,coefficient,margin,conversion`
    pub fn to_csv(&self, ids: Option<&[String]>) -> String {
        let mut out = String::from("record_id,coefficient,margin,conversion\n");
        for i in 0..self.coefficients.len() {
            let id = ids.map_or_else(|| i.to_string(), |ids| ids[i].clone());
            writeln!(
                out,
                "{id},{},{},{}",
                self.coefficients[i], self.margins[i], self.conversions[i]
            )
            .unwrap();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndividualConfig {
    pub step: f64,
    pub refine: bool,
}

impl Default for IndividualConfig {
    fn default() -> Self {
        IndividualConfig {
            step: 0.001,
            refine: true,
        }
    }
}

/// Interior grid `a + k·step`, `0 < k < K`, with `K·step ≈ b − a`. The end
/// points are excluded so every coefficient stays strictly inside the bounds.
pub fn interior_grid(bounds: Bounds, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("grid step must be positive, got {step}")));
    }
    let k = (bounds.width() / step).round() as usize;
    if k < 2 {
        return Err(Error::Config(format!(
            "grid step {step} leaves no interior point in ({}, {})",
            bounds.lower, bounds.upper
        )));
    }
    let step = bounds.width() / k as f64;
    Ok((1..k).map(|i| bounds.lower + i as f64 * step).collect())
}

/// `n` evenly spaced interior rates, `a + (k+1)(b − a)/(n+1)`.
pub fn default_rate_set(bounds: Bounds, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| bounds.lower + (k + 1) as f64 * bounds.width() / (n + 1) as f64)
        .collect()
}

fn argmax(grid: &[f64], g: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut best = (grid[0], g(grid[0]));
    for &c in &grid[1..] {
        let v = g(c);
        if v > best.1 {
            best = (c, v);
        }
    }
    best
}

/// Golden-section maximization of a unimodal function on `[lo, hi]`.
pub fn golden_section_max(g: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut g1, mut g2) = (g(x1), g(x2));
    while hi - lo > tol {
        if g1 < g2 {
            lo = x1;
            x1 = x2;
            g1 = g2;
            x2 = lo + inv_phi * (hi - lo);
            g2 = g(x2);
        } else {
            hi = x2;
            x2 = x1;
            g2 = g1;
            x1 = hi - inv_phi * (hi - lo);
            g1 = g(x1);
        }
    }
    if g1 >= g2 {
        (x1, g1)
    } else {
        (x2, g2)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    Ok(())
}

/// Per-record maximization of the relaxed margin-plus-conversion score.
pub fn individual_optimize(
    quotes: &Quotes,
    fmodel: &ConversionModel,
    lambda: f64,
    bounds: Bounds,
    config: &IndividualConfig,
) -> Result<IndividualSolution> {
    check_lambda(lambda)?;
    let grid = interior_grid(bounds, config.step)?;
    let spacing = grid[1] - grid[0];
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    let edge = 1e-9 * bounds.width();
    let idx: Vec<usize> = (0..quotes.len()).collect();
    let coefficients = par::map(&idx, |&i| {
        let g = |c: f64| record_objective(fmodel, quotes.base[i], quotes.premium[i], lambda, c);
        let (c0, v0) = argmax(&grid, g);
        if !config.refine {
            return c0;
        }
        // at an end of the grid, refine up to a hair from the bound itself
        let r_lo = if c0 == lo { bounds.lower + edge } else { c0 - spacing };
        let r_hi = if c0 == hi { bounds.upper - edge } else { c0 + spacing };
        let (c1, v1) = golden_section_max(g, r_lo, r_hi, 1e-9 * bounds.width());
        if v1 > v0 {
            c1
        } else {
            c0
        }
    });
    let method = if config.refine {
        SearchMethod::GridRefine
    } else {
        SearchMethod::Grid
    };
    Ok(IndividualSolution::assemble(quotes, fmodel, lambda, method, coefficients))
}

/// Per-record argmax over a fixed set of rates.
pub fn discrete_individual_optimize(
    quotes: &Quotes,
    fmodel: &ConversionModel,
    lambda: f64,
    bounds: Bounds,
    rates: &[f64],
) -> Result<IndividualSolution> {
    check_lambda(lambda)?;
    if rates.is_empty() {
        return Err(Error::Config("rate set is empty".into()));
    }
    if let Some(r) = rates.iter().find(|r| !bounds.contains_closed(**r)) {
        return Err(Error::Config(format!(
            "rate {r} lies outside [{}, {}]",
            bounds.lower, bounds.upper
        )));
    }
    let idx: Vec<usize> = (0..quotes.len()).collect();
    let coefficients = par::map(&idx, |&i| {
        argmax(rates, |c| record_objective(fmodel, quotes.base[i], quotes.premium[i], lambda, c)).0
    });
    Ok(IndividualSolution::assemble(quotes, fmodel, lambda, SearchMethod::Discrete, coefficients))
}
