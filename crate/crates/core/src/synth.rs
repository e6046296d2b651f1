//! Synthetic quote portfolios with known structure.
//!
//! Features `x0..x{d-1}` are standard normal and `region` is one of four
//! levels. The technical premium depends on `x1` and `x2` only. Acceptance
//! follows a logistic curve in log price whose feature part leans heavily on
//! `x0`, with weaker alternating-sign effects from the other features, so the
//! margin-optimal loading is a smooth function of the features. The
//! sensitive attribute `age` is correlated with `x0` (strength `dependence`)
//! and never used as a feature, which plants a price–age dependence in any
//! optimized ratebook.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnMapping, SensitiveColumn, SensitiveKind};
use crate::error::{Error, Result};
use crate::diff::sigmoid;

pub const REGIONS: [&str; 4] = ["east", "north", "south", "west"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    /// Number of numeric features, at least 3.
    pub d: usize,
    /// Log-price weight of the true acceptance curve.
    pub elasticity: f64,
    /// Weight of `x0` in the acceptance logit.
    pub x0_effect: f64,
    /// Magnitude of the alternating-sign weights of `x1..` in the logit.
    pub spread_effect: f64,
    /// Mean acceptance at historical prices, roughly.
    pub base_rate: f64,
    /// Correlation between `x0` and standardized age.
    pub dependence: f64,
    /// Mean technical premium.
    pub premium_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 10_000,
            d: 12,
            elasticity: -6.0,
            x0_effect: 1.0,
            spread_effect: 0.3,
            base_rate: 0.28,
            dependence: 0.8,
            premium_level: 100.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d < 3 {
            return Err(Error::Config("synth needs n >= 1 and d >= 3".into()));
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return Err(Error::Config("base_rate must lie in (0, 1)".into()));
        }
        if !(self.dependence.abs() <= 1.0) {
            return Err(Error::Config("dependence must lie in [-1, 1]".into()));
        }
        if !(self.premium_level > 0.0) || !self.elasticity.is_finite() {
            return Err(Error::Config("premium_level must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthRow {
    pub id: usize,
    pub x: Vec<f64>,
    pub region: &'static str,
    pub age: f64,
    pub employed: bool,
    pub premium: f64,
    pub price: f64,
    pub sale: bool,
    /// True acceptance probability at `price`.
    pub p_accept: f64,
}

fn region_effect(region: usize) -> f64 {
    [0.2, -0.1, 0.0, -0.15][region]
}

/// True acceptance logit without the price part.
fn feature_logit(cfg: &SynthConfig, x: &[f64], region: usize) -> f64 {
    let spread: f64 = x[1..]
        .iter()
        .enumerate()
        .map(|(j, v)| if j % 2 == 0 { *v } else { -v })
        .sum();
    cfg.x0_effect * x[0] + cfg.spread_effect * spread + region_effect(region)
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthRow>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Typical log price, used to centre the acceptance curve.
    let log_ref = (cfg.premium_level * 1.4).ln();
    let offset = (cfg.base_rate / (1.0 - cfg.base_rate)).ln() - cfg.elasticity * log_ref;
    let noise_scale = (1.0 - cfg.dependence * cfg.dependence).sqrt();
    let mut rows = Vec::with_capacity(cfg.n);
    for id in 0..cfg.n {
        let x: Vec<f64> = (0..cfg.d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let region = rng.random_range(0..REGIONS.len());
        let z: f64 = StandardNormal.sample(&mut rng);
        let age = (45.0 + 12.0 * (cfg.dependence * x[0] + noise_scale * z)).clamp(18.0, 90.0);
        let employed = rng.random::<f64>() < sigmoid(0.5 * x[1]);
        let premium = cfg.premium_level * (0.15 * x[1] + 0.1 * x[2]).exp();
        let price = premium * rng.random_range(1.1..1.7);
        let p_accept = sigmoid(offset + feature_logit(cfg, &x, region) + cfg.elasticity * price.ln());
        let sale = rng.random::<f64>() < p_accept;
        rows.push(SynthRow {
            id,
            x,
            region: REGIONS[region],
            age: (age * 10.0).round() / 10.0,
            employed,
            premium,
            price,
            sale,
            p_accept,
        });
    }
    Ok(rows)
}

/// Column order: `id, x0.., region, age, employed, premium, price, sale`.
pub fn to_csv(cfg: &SynthConfig, rows: &[SynthRow]) -> String {
    let mut out = String::from("id");
    for j in 0..cfg.d {
        write!(out, ",x{j}").unwrap();
    }
    out.push_str(",region,age,employed,premium,price,sale\n");
    for r in rows {
        write!(out, "{}", r.id).unwrap();
        for v in &r.x {
            write!(out, ",{v}").unwrap();
        }
        writeln!(
            out,
            ",{},{},{},{},{},{}",
            r.region,
            r.age,
            u8::from(r.employed),
            r.premium,
            r.price,
            u8::from(r.sale)
        )
        .unwrap();
    }
    out
}

/// Mapping for files written by [`to_csv`]. Age is sensitive (continuous),
/// employment is sensitive (binary); neither is a feature.
pub fn mapping(cfg: &SynthConfig) -> ColumnMapping {
    let mut features: Vec<String> = (0..cfg.d).map(|j| format!("x{j}")).collect();
    features.push("region".into());
    ColumnMapping {
        feature_columns: features,
        categorical_columns: vec!["region".into()],
        sale_column: "sale".into(),
        price_column: "price".into(),
        premium_column: Some("premium".into()),
        sensitive_columns: vec![
            SensitiveColumn {
                name: "age".into(),
                kind: SensitiveKind::Continuous,
            },
            SensitiveColumn {
                name: "employed".into(),
                kind: SensitiveKind::Binary,
            },
        ],
        id_column: Some("id".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversion_near_base_rate() {
        let cfg = SynthConfig {
            n: 4000,
            ..SynthConfig::default()
        };
        let rows = generate(&cfg).unwrap();
        let rate = rows.iter().filter(|r| r.sale).count() as f64 / rows.len() as f64;
        assert!((0.18..0.4).contains(&rate), "rate {rate}");
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig {
            n: 50,
            ..SynthConfig::default()
        };
        assert_eq!(to_csv(&cfg, &generate(&cfg).unwrap()), to_csv(&cfg, &generate(&cfg).unwrap()));
    }
}
