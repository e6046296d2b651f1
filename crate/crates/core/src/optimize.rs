//! Gradient-based coefficient training.
//!
//! The coefficient model is trained by plain mini-batch gradient descent on
//!
//! ```text
//! −mean[(ĉ·h − h)·f(x, ĉ·h)] − λ_f·mean[f(x, ĉ·h)] + λ_S·mean[φ̂(ĉ·h)·ψ̂(s)]
//! ```
//!
//! where the last term is only present for the fair trainer. In the fair
//! trainer every mini-batch first runs `n_a` ascent steps on the adversary
//! pair (prices held fixed), then one descent step on the coefficient
//! parameters (adversary held fixed).

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PortfolioRecord;
use crate::diff::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::hgr::{AdversaryConfig, AdversaryPair};
use crate::models::{Bounds, CoefficientModel, ConversionModel, PremiumModel};

/// Records prepared for pricing: encoded features, technical premium and the
/// price-independent part of the conversion logit.
#[derive(Clone, Debug)]
pub struct Quotes {
    pub x: Vec<Vec<f64>>,
    pub premium: Vec<f64>,
    pub base: Vec<f64>,
    /// One sensitive column, when fairness is in play.
    pub sensitive: Option<Vec<f64>>,
}

impl Quotes {
    pub fn new(
        records: &[PortfolioRecord],
        fmodel: &ConversionModel,
        hmodel: &PremiumModel,
        sensitive: Option<usize>,
    ) -> Result<Self> {
        let premium = hmodel.premiums(records)?;
        if let Some((i, h)) = premium.iter().enumerate().find(|(_, h)| !(**h > 0.0)) {
            return Err(Error::Validation(format!("premium of record {i} is not positive: {h}")));
        }
        let sensitive = match sensitive {
            Some(k) => Some(
                records
                    .iter()
                    .map(|r| {
                        r.s.get(k).copied().ok_or_else(|| {
                            Error::Validation(format!("record lacks sensitive value #{k}"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(Quotes {
            x: records.iter().map(|r| r.x.clone()).collect(),
            base: records.iter().map(|r| fmodel.base(&r.x)).collect(),
            premium,
            sensitive,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn coefficients(&self, cmodel: &CoefficientModel) -> Vec<f64> {
        self.x.iter().map(|x| cmodel.coefficient(x)).collect()
    }

    pub fn prices(&self, coefficients: &[f64]) -> Vec<f64> {
        coefficients.iter().zip(&self.premium).map(|(c, h)| c * h).collect()
    }
}

/// The margin and conversion parts of the objective on one batch.
#[derive(Clone, Copy, Debug)]
pub struct Terms<T> {
    /// `mean[(ĉ·h − h)·f]`
    pub margin: T,
    /// `mean[f]`
    pub conversion: T,
    /// `−margin − λ_f·conversion`
    pub objective: T,
}

/// Objective terms on the records `idx`, with the commercial prices they
/// were computed from.
pub fn optigrad_terms<T: Real>(
    cmodel: &CoefficientModel,
    params: &[T],
    fmodel: &ConversionModel,
    quotes: &Quotes,
    idx: &[usize],
    lambda_f: f64,
) -> (Terms<T>, Vec<T>) {
    assert!(!idx.is_empty(), "objective of an empty batch");
    let mut prices = Vec::with_capacity(idx.len());
    let mut margin_sum: Option<T> = None;
    let mut conv_sum: Option<T> = None;
    for &i in idx {
        let h = quotes.premium[i];
        let c = cmodel.coefficient_with(params, &quotes.x[i]);
        let price = c * h;
        let f = fmodel.prob_from_base(quotes.base[i], price);
        let margin = (price - h) * f;
        margin_sum = Some(margin_sum.map_or(margin, |s| s + margin));
        conv_sum = Some(conv_sum.map_or(f, |s| s + f));
        prices.push(price);
    }
    let n = idx.len() as f64;
    let margin = margin_sum.unwrap() / n;
    let conversion = conv_sum.unwrap() / n;
    let objective = -margin - conversion * lambda_f;
    (
        Terms {
            margin,
            conversion,
            objective,
        },
        prices,
    )
}

/// Differentiable margin-and-conversion objective on a batch.
pub fn optigrad_objective<'t>(
    cmodel: &CoefficientModel,
    params: &[Var<'t>],
    fmodel: &ConversionModel,
    quotes: &Quotes,
    idx: &[usize],
    lambda_f: f64,
) -> Var<'t> {
    optigrad_terms(cmodel, params, fmodel, quotes, idx, lambda_f).0.objective
}

/// Full fair objective with the adversary frozen.
#[allow(clippy::too_many_arguments)]
pub fn fair_objective<'t>(
    cmodel: &CoefficientModel,
    params: &[Var<'t>],
    fmodel: &ConversionModel,
    pair: &AdversaryPair,
    quotes: &Quotes,
    idx: &[usize],
    lambda_f: f64,
    lambda_s: f64,
) -> Result<Var<'t>> {
    let (terms, prices) = optigrad_terms(cmodel, params, fmodel, quotes, idx, lambda_f);
    let s = batch_sensitive(quotes, idx)?;
    let penalty = pair.penalty(&prices, &s)?;
    Ok(terms.objective + penalty.value * lambda_s)
}

fn batch_sensitive(quotes: &Quotes, idx: &[usize]) -> Result<Vec<f64>> {
    let s = quotes
        .sensitive
        .as_ref()
        .ok_or_else(|| Error::Validation("fair training needs a sensitive column".into()))?;
    Ok(idx.iter().map(|&i| s[i]).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Epoch with the lowest dev objective.
    #[default]
    BestDev,
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_f: f64,
    pub lambda_s: f64,
    pub a: f64,
    pub b: f64,
    /// Number of epochs.
    pub n_e: usize,
    pub batch_size: usize,
    pub alpha_c: f64,
    pub alpha_phi: f64,
    pub alpha_psi: f64,
    /// Adversary ascent steps per coefficient step.
    pub n_a: usize,
    pub seed: u64,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adv = AdversaryConfig::default();
        TrainConfig {
            lambda_f: 0.0,
            lambda_s: 0.0,
            a: 1.2,
            b: 1.6,
            n_e: 100,
            batch_size: 256,
            alpha_c: 0.01,
            alpha_phi: adv.lr_phi,
            alpha_psi: adv.lr_psi,
            n_a: adv.n_a,
            seed: 0,
            selection: Selection::BestDev,
        }
    }
}

impl TrainConfig {
    pub fn bounds(&self) -> Result<Bounds> {
        Bounds::new(self.a, self.b)
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds()?;
        let positive = [
            ("alpha_c", self.alpha_c),
            ("alpha_phi", self.alpha_phi),
            ("alpha_psi", self.alpha_psi),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda_f", self.lambda_f), ("lambda_s", self.lambda_s)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 || self.n_e == 0 {
            return Err(Error::Config("batch_size and n_e must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub objective: f64,
    /// Mean margin per record on the training split.
    pub gwm: f64,
    pub conversion: f64,
    /// Signed `mean(φ̂·ψ̂)` on the training split with the current adversary.
    pub fairness: f64,
    /// `|fairness|`.
    pub hgr: f64,
    /// Selection score on dev: objective with `|fairness|`.
    pub dev_objective: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochTrace>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,objective,gwm,conversion,fairness,hgr,seconds\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.epoch, e.objective, e.gwm, e.conversion, e.fairness, e.hgr, e.seconds
            )
            .unwrap();
        }
        out
    }

    /// Trace with wall-clock times zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainTrace {
        TrainTrace {
            epochs: self
                .epochs
                .iter()
                .map(|e| EpochTrace {
                    seconds: 0.0,
                    ..e.clone()
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot chosen by `TrainConfig::selection`.
    pub model: CoefficientModel,
    pub best_dev: CoefficientModel,
    pub final_model: CoefficientModel,
    pub best_epoch: usize,
    pub adversary: Option<AdversaryPair>,
    pub trace: TrainTrace,
    /// Coefficient parameters after every update, when requested.
    pub trajectory: Option<Vec<Vec<f64>>>,
}

/// Options that do not change the optimization itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainHooks {
    pub record_trajectory: bool,
    /// Check the bound invariant on every batch (slower).
    pub check_bounds: bool,
}

/// Alg. 1: margin and conversion only.
pub fn train_optigrad(
    train: &Quotes,
    dev: &Quotes,
    fmodel: &ConversionModel,
    init: CoefficientModel,
    cfg: &TrainConfig,
    hooks: TrainHooks,
) -> Result<TrainOutcome> {
    run(train, dev, fmodel, init, None, cfg, hooks)
}

/// Alg. 2: adds the adversarial HGR penalty.
pub fn train_fair_optigrad(
    train: &Quotes,
    dev: &Quotes,
    fmodel: &ConversionModel,
    init: CoefficientModel,
    adversary: AdversaryPair,
    cfg: &TrainConfig,
    hooks: TrainHooks,
) -> Result<TrainOutcome> {
    if train.sensitive.is_none() {
        return Err(Error::Validation("fair training needs a sensitive column".into()));
    }
    run(train, dev, fmodel, init, Some(adversary), cfg, hooks)
}

/// Builds an adversary whose input scalers come from the initial prices.
pub fn init_adversary(
    train: &Quotes,
    cmodel: &CoefficientModel,
    hidden: usize,
    seed: u64,
) -> Result<AdversaryPair> {
    let s = train
        .sensitive
        .as_ref()
        .ok_or_else(|| Error::Validation("adversary needs a sensitive column".into()))?;
    let prices = train.prices(&train.coefficients(cmodel));
    Ok(AdversaryPair::new(hidden, &prices, s, 1, seed ^ 0x5eed_adf0))
}

struct Snapshot {
    objective: f64,
    params: Vec<f64>,
    epoch: usize,
}

fn aborted(player: &'static str, err: Error, trace: &TrainTrace) -> Error {
    Error::Aborted {
        player,
        reason: err.to_string(),
        trace: Box::new(trace.clone()),
    }
}

fn run(
    train: &Quotes,
    dev: &Quotes,
    fmodel: &ConversionModel,
    mut cmodel: CoefficientModel,
    mut adversary: Option<AdversaryPair>,
    cfg: &TrainConfig,
    hooks: TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("no training records".into()));
    }
    cmodel.bounds = cfg.bounds()?;
    cmodel.validate(train.x[0].len())?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let all_train: Vec<usize> = (0..train.len()).collect();
    let all_dev: Vec<usize> = (0..dev.len()).collect();
    let mut tape = Tape::with_capacity(cfg.batch_size * 64);
    let mut adv_tape = Tape::new();
    let mut trace = TrainTrace::default();
    let mut best: Option<Snapshot> = None;
    let mut trajectory = hooks.record_trajectory.then(Vec::new);
    let use_penalty = adversary.is_some() && cfg.lambda_s > 0.0;

    for epoch in 0..cfg.n_e {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            // Adversary: n_a ascent steps at the current prices.
            if let Some(pair) = adversary.as_mut() {
                if batch.len() >= 2 {
                    let prices: Vec<f64> = batch
                        .iter()
                        .map(|&i| cmodel.coefficient(&train.x[i]) * train.premium[i])
                        .collect();
                    let s = batch_sensitive(train, batch)?;
                    for _ in 0..cfg.n_a {
                        pair.ascent_step(&mut adv_tape, &prices, &s, cfg.alpha_phi, cfg.alpha_psi)
                            .map_err(|e| aborted("adversary", e, &trace))?;
                    }
                }
            }

            // Coefficient model: one descent step.
            tape.clear();
            let grads = {
                let params = tape.vars(cmodel.params());
                let (terms, prices) =
                    optigrad_terms(&cmodel, &params, fmodel, train, batch, cfg.lambda_f);
                let mut objective = terms.objective;
                if use_penalty && batch.len() >= 2 {
                    let pair = adversary.as_ref().unwrap();
                    let s = batch_sensitive(train, batch)?;
                    let penalty = pair
                        .penalty(&prices, &s)
                        .map_err(|e| aborted("coefficient", e, &trace))?;
                    objective = objective + penalty.value * cfg.lambda_s;
                }
                if hooks.check_bounds {
                    for &i in batch {
                        let c = cmodel.coefficient(&train.x[i]);
                        assert!(cmodel.bounds.contains_open(c), "coefficient {c} escaped bounds");
                    }
                }
                let g = tape
                    .backward(objective)
                    .map_err(|e| aborted("coefficient", Error::from(e), &trace))?;
                g.collect(&params)
            };
            for (w, g) in cmodel.params_mut().iter_mut().zip(&grads) {
                *w -= cfg.alpha_c * g;
            }
            if let Some(t) = trajectory.as_mut() {
                t.push(cmodel.params().to_vec());
            }
        }

        // Epoch summary on the full training split.
        let (terms, prices) =
            optigrad_terms(&cmodel, cmodel.params(), fmodel, train, &all_train, cfg.lambda_f);
        let fairness = match (&adversary, &train.sensitive) {
            (Some(pair), Some(s)) if train.len() >= 2 => pair.estimate(&prices, s)?.value,
            _ => 0.0,
        };
        let lambda_s = if adversary.is_some() { cfg.lambda_s } else { 0.0 };
        let objective = terms.objective + lambda_s * fairness;

        // Selection scores dependence by magnitude: a stale adversary whose
        // sign has flipped must not make a dependent epoch look good.
        let dev_objective = if dev.is_empty() {
            terms.objective + lambda_s * fairness.abs()
        } else {
            let (dterms, dprices) =
                optigrad_terms(&cmodel, cmodel.params(), fmodel, dev, &all_dev, cfg.lambda_f);
            let dfair = match (&adversary, &dev.sensitive) {
                (Some(pair), Some(s)) if dev.len() >= 2 => pair.estimate(&dprices, s)?.value,
                _ => 0.0,
            };
            dterms.objective + lambda_s * dfair.abs()
        };
        if !objective.is_finite() || !dev_objective.is_finite() {
            return Err(aborted(
                "coefficient",
                Error::Numerical(format!("objective became non-finite at epoch {epoch}")),
                &trace,
            ));
        }
        trace.epochs.push(EpochTrace {
            epoch,
            objective,
            gwm: terms.margin,
            conversion: terms.conversion,
            fairness,
            hgr: fairness.abs(),
            dev_objective,
            seconds: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|b| dev_objective < b.objective) {
            best = Some(Snapshot {
                objective: dev_objective,
                params: cmodel.params().to_vec(),
                epoch,
            });
        }
    }

    let best = best.expect("at least one epoch");
    let mut best_dev = cmodel.clone();
    best_dev.params_mut().copy_from_slice(&best.params);
    let model = match cfg.selection {
        Selection::BestDev => best_dev.clone(),
        Selection::Final => cmodel.clone(),
    };
    Ok(TrainOutcome {
        model,
        best_dev,
        final_model: cmodel,
        best_epoch: best.epoch,
        adversary,
        trace,
        trajectory,
    })
}
