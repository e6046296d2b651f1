//! Runs one pricing method on a prepared portfolio and scores it per split.

use serde::{Deserialize, Serialize};

use crate::baselines::{
    default_rate_set, discrete_individual_optimize, fit_indirect_ratebook, individual_optimize,
    predict_indirect, BoostConfig, BoostedTreeModel, IndividualConfig, IndividualSolution,
};
use crate::data::{Portfolio, SplitId};
use crate::error::{Error, Result};
use crate::eval::{conversion_rate, fairness_report, gwm, FairnessConfig, FrontierPoint, Method, RunKey};
use crate::models::{Bounds, CoefficientModel, ConversionModel, PremiumModel};
use crate::optimize::{
    init_adversary, train_fair_optigrad, train_optigrad, Quotes, TrainConfig, TrainHooks, TrainOutcome,
};

pub const SPLITS: [SplitId; 3] = [SplitId::Train, SplitId::Dev, SplitId::Test];

/// Quotes of all three splits under fixed conversion and premium models.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Quotes,
    pub dev: Quotes,
    pub test: Quotes,
    pub fmodel: ConversionModel,
    pub dim: usize,
}

impl Prepared {
    pub fn new(
        portfolio: &Portfolio,
        fmodel: ConversionModel,
        hmodel: &PremiumModel,
        sensitive: Option<usize>,
    ) -> Result<Self> {
        let make = |s| Quotes::new(&portfolio.subset(s), &fmodel, hmodel, sensitive);
        Ok(Prepared {
            train: make(SplitId::Train)?,
            dev: make(SplitId::Dev)?,
            test: make(SplitId::Test)?,
            dim: portfolio.dim(),
            fmodel,
        })
    }

    pub fn split(&self, split: SplitId) -> &Quotes {
        match split {
            SplitId::Train => &self.train,
            SplitId::Dev => &self.dev,
            SplitId::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientKind {
    #[default]
    Linear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoefficientConfig {
    pub kind: CoefficientKind,
    /// Hidden layer widths for the MLP variant.
    pub hidden: Vec<usize>,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        CoefficientConfig {
            kind: CoefficientKind::Linear,
            hidden: vec![32, 32],
        }
    }
}

impl CoefficientConfig {
    pub fn build(&self, dim: usize, bounds: Bounds, seed: u64) -> CoefficientModel {
        match self.kind {
            CoefficientKind::Linear => CoefficientModel::linear(dim, bounds, seed),
            CoefficientKind::Mlp => CoefficientModel::mlp(dim, &self.hidden, bounds, seed),
        }
    }
}

/// Everything a method needs besides its sweep key.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSettings {
    /// Template; `lambda_f`, `lambda_s` and `seed` come from the run key.
    pub train: TrainConfig,
    pub coefficient: CoefficientConfig,
    pub adversary_hidden: Option<usize>,
    pub individual: IndividualConfig,
    pub boost: BoostConfig,
    /// Rate set of the discrete baseline; defaults to 21 interior rates.
    pub rates: Option<Vec<f64>>,
}

impl MethodSettings {
    pub fn bounds(&self) -> Result<Bounds> {
        self.train.bounds()
    }

    pub fn train_config(&self, key: &RunKey) -> TrainConfig {
        TrainConfig {
            lambda_f: key.lambda_f,
            lambda_s: key.lambda_s,
            seed: key.seed,
            ..self.train.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub enum Artifact {
    Trained(Box<TrainOutcome>),
    /// One solution per split, in `SPLITS` order.
    Individual(Vec<IndividualSolution>),
    Indirect {
        model: BoostedTreeModel,
        targets: IndividualSolution,
    },
}

#[derive(Clone, Debug)]
pub struct MethodRun {
    pub key: RunKey,
    /// Coefficients per split, in `SPLITS` order.
    pub coefficients: Vec<Vec<f64>>,
    pub artifact: Artifact,
}

impl MethodRun {
    pub fn coefficients(&self, split: SplitId) -> &[f64] {
        &self.coefficients[SPLITS.iter().position(|s| *s == split).unwrap()]
    }
}

/// Trains or solves `key.method` and returns coefficients for every split.
pub fn run_method(prepared: &Prepared, key: &RunKey, settings: &MethodSettings) -> Result<MethodRun> {
    let bounds = settings.bounds()?;
    let per_split = |f: &dyn Fn(&Quotes) -> Result<Vec<f64>>| -> Result<Vec<Vec<f64>>> {
        SPLITS.iter().map(|&s| f(prepared.split(s))).collect()
    };
    let (coefficients, artifact) = match key.method {
        Method::OptiGrad | Method::FairOptiGrad => {
            let cfg = settings.train_config(key);
            let init = settings.coefficient.build(prepared.dim, bounds, key.seed);
            let outcome = if key.method == Method::OptiGrad {
                train_optigrad(&prepared.train, &prepared.dev, &prepared.fmodel, init, &cfg, TrainHooks::default())?
            } else {
                let hidden = settings.adversary_hidden.unwrap_or(16);
                let adv = init_adversary(&prepared.train, &init, hidden, key.seed)?;
                train_fair_optigrad(
                    &prepared.train,
                    &prepared.dev,
                    &prepared.fmodel,
                    init,
                    adv,
                    &cfg,
                    TrainHooks::default(),
                )?
            };
            let coefs = per_split(&|q| Ok(q.coefficients(&outcome.model)))?;
            (coefs, Artifact::Trained(Box::new(outcome)))
        }
        Method::Individual => {
            let sols = SPLITS
                .iter()
                .map(|&s| {
                    individual_optimize(prepared.split(s), &prepared.fmodel, key.lambda_f, bounds, &settings.individual)
                })
                .collect::<Result<Vec<_>>>()?;
            let coefs = sols.iter().map(|s| s.coefficients.clone()).collect();
            (coefs, Artifact::Individual(sols))
        }
        Method::Discrete => {
            let rates = settings.rates.clone().unwrap_or_else(|| default_rate_set(bounds, 21));
            let sols = SPLITS
                .iter()
                .map(|&s| discrete_individual_optimize(prepared.split(s), &prepared.fmodel, key.lambda_f, bounds, &rates))
                .collect::<Result<Vec<_>>>()?;
            let coefs = sols.iter().map(|s| s.coefficients.clone()).collect();
            (coefs, Artifact::Individual(sols))
        }
        Method::Indirect => {
            let targets =
                individual_optimize(&prepared.train, &prepared.fmodel, key.lambda_f, bounds, &settings.individual)?;
            let model = fit_indirect_ratebook(&prepared.train.x, &targets.coefficients, bounds, &settings.boost)?;
            let coefs = per_split(&|q| Ok(q.x.iter().map(|x| predict_indirect(&model, x)).collect()))?;
            (coefs, Artifact::Indirect { model, targets })
        }
    };
    Ok(MethodRun {
        key: *key,
        coefficients,
        artifact,
    })
}

/// Scores a run on every split. Fairness scores need a sensitive column in
/// the prepared quotes and are skipped when `fairness` is `None`.
pub fn evaluate(
    prepared: &Prepared,
    run: &MethodRun,
    bounds: Bounds,
    fairness: Option<&FairnessConfig>,
) -> Result<Vec<FrontierPoint>> {
    SPLITS
        .iter()
        .map(|&split| {
            let quotes = prepared.split(split);
            let coefs = run.coefficients(split);
            let report = match (fairness, &quotes.sensitive) {
                (Some(cfg), Some(s)) => Some(fairness_report(&quotes.prices(coefs), s, cfg)?),
                (Some(_), None) => {
                    return Err(Error::Validation("fairness scores need a sensitive column".into()))
                }
                _ => None,
            };
            Ok(FrontierPoint {
                method: run.key.method,
                lambda_f: run.key.lambda_f,
                lambda_s: run.key.lambda_s,
                split,
                gwm: gwm(quotes, coefs, &prepared.fmodel, bounds)?,
                conversion_rate: conversion_rate(quotes, coefs, &prepared.fmodel, bounds)?,
                rdc_score: report.map(|r| r.rdc),
                hgr_score: report.map(|r| r.hgr),
                pearson: report.map(|r| r.pearson),
                seed: run.key.seed,
                n: quotes.len(),
            })
        })
        .collect()
}
