//! Browser bindings: a synthetic portfolio with a fitted demand model, and
//! three read-only views over it. Every call returns a JSON string.

use elastic_pricing::baselines::{individual_optimize, interior_grid, record_objective, IndividualConfig};
use elastic_pricing::data::{load_portfolio_from_bytes, Portfolio, SplitId};
use elastic_pricing::eval::{fairness_report, uplift_curve as curve, FairnessConfig};
use elastic_pricing::hgr::HgrConfig;
use elastic_pricing::models::{fit_conversion, Bounds, ConversionFitConfig, ConversionModel, PremiumModel};
use elastic_pricing::optimize::Quotes;
use elastic_pricing::synth::{self, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js)
}

#[wasm_bindgen]
pub struct Demo {
    portfolio: Portfolio,
    quotes: Quotes,
    fmodel: ConversionModel,
}

#[derive(Serialize)]
struct Summary {
    records: usize,
    train: usize,
    w_p: f64,
    dev_log_loss: f64,
}

#[derive(Serialize)]
struct Profile {
    index: usize,
    premium: f64,
    lambda: f64,
    /// `(c, score, conversion)` along the coefficient grid.
    curve: Vec<(f64, f64, f64)>,
    best: f64,
    best_margin: f64,
    best_conversion: f64,
}

#[derive(Serialize)]
struct Dependence {
    rdc: f64,
    hgr: f64,
    pearson: f64,
    n: usize,
}

#[wasm_bindgen]
impl Demo {
    /// Generates `n` synthetic quotes and fits the demand model on the train split.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, seed: u64, elasticity: f64) -> Result<Demo, JsError> {
        let cfg = SynthConfig {
            n,
            seed,
            elasticity,
            ..SynthConfig::default()
        };
        let csv = synth::to_csv(&cfg, &synth::generate(&cfg).map_err(js)?);
        let portfolio =
            load_portfolio_from_bytes(csv.as_bytes(), &synth::mapping(&cfg), [0.6, 0.2, 0.2], seed).map_err(js)?;
        let fit = fit_conversion(
            &portfolio.subset(SplitId::Train),
            &portfolio.subset(SplitId::Dev),
            &ConversionFitConfig::default(),
        )
        .map_err(js)?;
        let quotes = Quotes::new(&portfolio.subset(SplitId::Test), &fit.model, &PremiumModel::Column, None)
            .map_err(js)?;
        Ok(Demo {
            portfolio,
            quotes,
            fmodel: fit.model,
        })
    }

    pub fn summary(&self) -> Result<String, JsError> {
        to_json(&Summary {
            records: self.portfolio.len(),
            train: self.portfolio.indices(SplitId::Train).len(),
            w_p: self.fmodel.w_p,
            dev_log_loss: elastic_pricing::models::mean_log_loss(&self.fmodel, &self.portfolio.subset(SplitId::Dev)),
        })
    }

    /// Mean predicted conversion when all historical prices rise by
    /// `0, max/steps, ..., max`.
    pub fn uplift_curve(&self, max: f64, steps: usize) -> Result<String, JsError> {
        let steps = steps.max(1);
        let ks: Vec<f64> = (0..=steps).map(|k| max * k as f64 / steps as f64).collect();
        to_json(&curve(&self.portfolio.subset(SplitId::Test), &self.fmodel, &ks).map_err(js)?)
    }

    /// Score of one test customer along the coefficient range and the
    /// individually optimal coefficient at conversion weight `lambda`.
    pub fn customer_profile(&self, index: usize, lambda: f64, a: f64, b: f64) -> Result<String, JsError> {
        if index >= self.quotes.len() {
            return Err(js(format!("customer index {index} out of range (0..{})", self.quotes.len())));
        }
        let bounds = Bounds::new(a, b).map_err(js)?;
        let one = Quotes {
            x: vec![self.quotes.x[index].clone()],
            premium: vec![self.quotes.premium[index]],
            base: vec![self.quotes.base[index]],
            sensitive: None,
        };
        let sol = individual_optimize(&one, &self.fmodel, lambda, bounds, &IndividualConfig::default()).map_err(js)?;
        let (base, h) = (one.base[0], one.premium[0]);
        let grid = interior_grid(bounds, bounds.width() / 100.0).map_err(js)?;
        let curve = grid
            .iter()
            .map(|&c| {
                (
                    c,
                    record_objective(&self.fmodel, base, h, lambda, c),
                    self.fmodel.prob_from_base(base, c * h),
                )
            })
            .collect();
        to_json(&Profile {
            index,
            premium: h,
            lambda,
            curve,
            best: sol.coefficients[0],
            best_margin: sol.margins[0],
            best_conversion: sol.conversions[0],
        })
    }
}

/// RDC, neural HGR and Pearson on a generated pair `y = shape(x) + noise·z`,
/// with `shape` one of `linear`, `quadratic`, `sine` or `independent`.
#[wasm_bindgen]
pub fn dependence(shape: &str, n: usize, noise: f64, seed: u64) -> Result<String, JsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let signal = match shape {
                "linear" => Ok(v),
                "quadratic" => Ok(v * v),
                "sine" => Ok((3.0 * v).sin()),
                "independent" => Ok(0.0),
                other => Err(js(format!("unknown shape `{other}`"))),
            }?;
            Ok(signal + noise * z)
        })
        .collect::<Result<_, JsError>>()?;
    let cfg = FairnessConfig {
        hgr: HgrConfig {
            max_steps: 600,
            ..HgrConfig::default()
        },
        hgr_max_n: 1000,
        ..FairnessConfig::default()
    };
    let r = fairness_report(&x, &y, &cfg).map_err(js)?;
    to_json(&Dependence {
        rdc: r.rdc,
        hgr: r.hgr,
        pearson: r.pearson,
        n: r.n,
    })
}
