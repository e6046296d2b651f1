#![allow(dead_code)]

use elastic_pricing::data::{load_portfolio_from_bytes, Portfolio, SplitId};
use elastic_pricing::models::{fit_conversion, ConversionFitConfig, ConversionModel, PremiumModel};
use elastic_pricing::optimize::Quotes;
use elastic_pricing::pipeline::Prepared;
use elastic_pricing::synth::{self, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Synthetic portfolio, fitted conversion model and column premiums, with
/// age as the sensitive attribute.
pub fn synthetic(n: usize, seed: u64) -> (Portfolio, Prepared) {
    let cfg = SynthConfig {
        n,
        seed,
        ..SynthConfig::default()
    };
    let csv = synth::to_csv(&cfg, &synth::generate(&cfg).unwrap());
    let p = load_portfolio_from_bytes(csv.as_bytes(), &synth::mapping(&cfg), [0.6, 0.2, 0.2], seed).unwrap();
    let fit = fit_conversion(
        &p.subset(SplitId::Train),
        &p.subset(SplitId::Dev),
        &ConversionFitConfig::default(),
    )
    .unwrap();
    let prepared = Prepared::new(&p, fit.model, &PremiumModel::Column, Some(0)).unwrap();
    (p, prepared)
}

/// Random quotes with a known conversion model, for small gradient checks.
pub fn random_quotes(n: usize, d: usize, seed: u64) -> (Quotes, ConversionModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fmodel = ConversionModel {
        w_x: (0..d).map(|_| StandardNormal.sample(&mut rng)).collect(),
        w_p: -rng.random_range(1.0..8.0),
        bias: 0.0,
    };
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let premium: Vec<f64> = (0..n).map(|_| rng.random_range(50.0..200.0)).collect();
    // centre the logit near the typical price so f is not saturated
    let shift = -fmodel.w_p * (1.4f64 * 120.0).ln() - 1.0;
    let base = x.iter().map(|x| fmodel.base(x) + shift).collect();
    let sensitive = Some((0..n).map(|_| rng.random_range(18.0..80.0)).collect());
    (
        Quotes {
            x,
            premium,
            base,
            sensitive,
        },
        fmodel,
    )
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut p = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let hi = f(&p);
            p[i] = orig - step;
            let lo = f(&p);
            p[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}
