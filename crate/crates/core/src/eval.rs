//! Portfolio metrics, fairness scores and the frontier sweep harness.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PortfolioRecord, SplitId};
use crate::error::{Error, Result};
use crate::hgr::{hgr_metric, HgrConfig};
use crate::models::{Bounds, ConversionModel, PremiumModel};
use crate::optimize::Quotes;
use crate::par;
use crate::rdc::{pearson, rdc, RdcConfig};

fn check_coefficients(coefficients: &[f64], n: usize, bounds: Bounds) -> Result<()> {
    if coefficients.len() != n {
        return Err(Error::Validation(format!(
            "{} coefficients for {n} records",
            coefficients.len()
        )));
    }
    if let Some((i, c)) = coefficients
        .iter()
        .enumerate()
        .find(|(_, c)| !bounds.contains_closed(**c))
    {
        return Err(Error::Validation(format!(
            "coefficient {c} of record {i} lies outside [{}, {}]",
            bounds.lower, bounds.upper
        )));
    }
    Ok(())
}

/// `Σ (c·h − h)·f(x, c·h)` over prepared quotes.
pub fn gwm(quotes: &Quotes, coefficients: &[f64], fmodel: &ConversionModel, bounds: Bounds) -> Result<f64> {
    check_coefficients(coefficients, quotes.len(), bounds)?;
    Ok(coefficients
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let h = quotes.premium[i];
            (c * h - h) * fmodel.prob_from_base(quotes.base[i], c * h)
        })
        .sum())
}

/// Mean predicted conversion at the commercial prices.
pub fn conversion_rate(
    quotes: &Quotes,
    coefficients: &[f64],
    fmodel: &ConversionModel,
    bounds: Bounds,
) -> Result<f64> {
    check_coefficients(coefficients, quotes.len(), bounds)?;
    if quotes.is_empty() {
        return Err(Error::Validation("conversion rate of an empty portfolio".into()));
    }
    Ok(coefficients
        .iter()
        .enumerate()
        .map(|(i, &c)| fmodel.prob_from_base(quotes.base[i], c * quotes.premium[i]))
        .sum::<f64>()
        / quotes.len() as f64)
}

/// [`gwm`] straight from records.
pub fn gwm_records(
    records: &[PortfolioRecord],
    coefficients: &[f64],
    fmodel: &ConversionModel,
    hmodel: &PremiumModel,
    bounds: Bounds,
) -> Result<f64> {
    gwm(&Quotes::new(records, fmodel, hmodel, None)?, coefficients, fmodel, bounds)
}

/// Mean predicted conversion when every historical price is raised by the
/// same fraction. Returns `(uplift, conversion)` pairs in input order.
pub fn uplift_curve(
    records: &[PortfolioRecord],
    fmodel: &ConversionModel,
    uplifts: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if records.is_empty() {
        return Err(Error::Validation("uplift curve of an empty portfolio".into()));
    }
    let bases: Vec<f64> = records.iter().map(|r| fmodel.base(&r.x)).collect();
    uplifts
        .iter()
        .map(|&k| {
            if !(k > -1.0) || !k.is_finite() {
                return Err(Error::Domain(format!("uplift must be finite and above -100%, got {k}")));
            }
            let total: f64 = records
                .iter()
                .zip(&bases)
                .map(|(r, &b)| fmodel.prob_from_base(b, r.price_hist * (1.0 + k)))
                .sum();
            Ok((k, total / records.len() as f64))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FairnessConfig {
    /// RDC is reported as the median over this many projection seeds.
    pub rdc_seeds: u64,
    pub rdc: RdcConfig,
    pub hgr: HgrConfig,
    /// HGR is estimated on a seeded subsample of at most this many records.
    pub hgr_max_n: usize,
}

impl Default for FairnessConfig {
    fn default() -> Self {
        FairnessConfig {
            rdc_seeds: 5,
            rdc: RdcConfig::default(),
            hgr: HgrConfig::default(),
            hgr_max_n: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub rdc: f64,
    pub hgr: f64,
    /// Absolute Pearson correlation.
    pub pearson: f64,
    /// Prices or sensitive values were constant.
    pub degenerate: bool,
    pub n: usize,
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

/// Dependence between offered prices and one sensitive attribute.
pub fn fairness_report(prices: &[f64], sensitive: &[f64], cfg: &FairnessConfig) -> Result<FairnessReport> {
    let n = prices.len();
    if n != sensitive.len() {
        return Err(Error::Validation(format!(
            "{n} prices for {} sensitive values",
            sensitive.len()
        )));
    }
    if n < 50 {
        return Err(Error::Validation(format!("fairness needs at least 50 records, got {n}")));
    }
    if is_constant(prices) || is_constant(sensitive) {
        return Ok(FairnessReport {
            rdc: 0.0,
            hgr: 0.0,
            pearson: 0.0,
            degenerate: true,
            n,
        });
    }
    let mut rdcs = (0..cfg.rdc_seeds.max(1))
        .map(|k| {
            let c = RdcConfig {
                seed: cfg.rdc.seed.wrapping_add(k),
                ..cfg.rdc.clone()
            };
            rdc(prices, sensitive, &c)
        })
        .collect::<Result<Vec<_>>>()?;
    rdcs.sort_by(f64::total_cmp);
    let rdc_median = rdcs[rdcs.len() / 2];

    let hgr = if n > cfg.hgr_max_n {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.hgr.seed ^ 0x4a5b);
        let mut idx = sample(&mut rng, n, cfg.hgr_max_n).into_vec();
        idx.sort_unstable();
        let u: Vec<f64> = idx.iter().map(|&i| prices[i]).collect();
        let v: Vec<f64> = idx.iter().map(|&i| sensitive[i]).collect();
        hgr_metric(&u, &v, &cfg.hgr)?
    } else {
        hgr_metric(prices, sensitive, &cfg.hgr)?
    };
    Ok(FairnessReport {
        rdc: rdc_median,
        hgr: hgr.value,
        pearson: pearson(prices, sensitive).abs(),
        degenerate: false,
        n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[serde(rename = "optigrad")]
    OptiGrad,
    #[serde(rename = "fair-optigrad")]
    FairOptiGrad,
    Individual,
    Indirect,
    Discrete,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::OptiGrad => "optigrad",
            Method::FairOptiGrad => "fair-optigrad",
            Method::Individual => "individual",
            Method::Indirect => "indirect",
            Method::Discrete => "discrete",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::OptiGrad,
            Method::FairOptiGrad,
            Method::Individual,
            Method::Indirect,
            Method::Discrete,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown method `{s}` (expected optigrad, fair-optigrad, individual, indirect or discrete)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub method: Method,
    pub lambda_f: f64,
    pub lambda_s: f64,
    pub split: SplitId,
    pub gwm: f64,
    pub conversion_rate: f64,
    pub rdc_score: Option<f64>,
    pub hgr_score: Option<f64>,
    pub pearson: Option<f64>,
    pub seed: u64,
    pub n: usize,
}

/// Identity of a sweep point, excluding the split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub method: Method,
    pub lambda_f: f64,
    pub lambda_s: f64,
    pub seed: u64,
}

impl RunKey {
    fn ordered(&self) -> (Method, u64, u64, u64) {
        (self.method, self.lambda_f.to_bits(), self.lambda_s.to_bits(), self.seed)
    }
}

impl FrontierPoint {
    pub fn run_key(&self) -> RunKey {
        RunKey {
            method: self.method,
            lambda_f: self.lambda_f,
            lambda_s: self.lambda_s,
            seed: self.seed,
        }
    }

    fn key(&self) -> ((Method, u64, u64, u64), SplitId) {
        (self.run_key().ordered(), self.split)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub dataset_fingerprint: String,
    /// Unix seconds of the last write.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub key: RunKey,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrontierTable {
    pub points: Vec<FrontierPoint>,
    #[serde(default)]
    pub failures: Vec<FailedRun>,
    pub provenance: Provenance,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl FrontierTable {
    pub fn new(provenance: Provenance) -> Self {
        FrontierTable {
            points: Vec::new(),
            failures: Vec::new(),
            provenance,
        }
    }

    /// Adds a point, rejecting duplicate `(method, λ_f, λ_S, split, seed)` keys.
    pub fn insert(&mut self, point: FrontierPoint) -> Result<()> {
        if self.points.iter().any(|p| p.key() == point.key()) {
            return Err(Error::Validation(format!(
                "duplicate frontier point {} λ_f={} λ_S={} {} seed {}",
                point.method, point.lambda_f, point.lambda_s, point.split, point.seed
            )));
        }
        if !(0.0..=1.0).contains(&point.conversion_rate) || !point.gwm.is_finite() {
            return Err(Error::Validation(format!(
                "frontier point has conversion {} and GWM {}",
                point.conversion_rate, point.gwm
            )));
        }
        self.points.push(point);
        Ok(())
    }

    pub fn contains_run(&self, key: &RunKey) -> bool {
        self.points.iter().any(|p| p.run_key().ordered() == key.ordered())
    }

    /// Sorts points by key so the table's serialization is order-independent.
    pub fn normalize(&mut self) {
        self.points.sort_by_key(|a| a.key());
        self.failures.sort_by_key(|a| a.key.ordered());
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,lambda_f,lambda_s,split,seed,n,gwm,conversion_rate,rdc,hgr,pearson\n",
        );
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                p.method,
                p.lambda_f,
                p.lambda_s,
                p.split,
                p.seed,
                p.n,
                p.gwm,
                p.conversion_rate,
                opt(p.rdc_score),
                opt(p.hgr_score),
                opt(p.pearson)
            )
            .unwrap();
        }
        out
    }

    /// SHA-256 of the CSV rendering; the timestamp does not enter.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }

    pub fn select(&self, method: Method, split: SplitId) -> Vec<&FrontierPoint> {
        self.points
            .iter()
            .filter(|p| p.method == method && p.split == split)
            .collect()
    }
}

/// Runs every grid entry whose key is not yet in `table`, in parallel.
///
/// `run` returns one point per split. Failures are recorded and do not stop
/// the sweep. Returns the number of runs executed.
pub fn sweep<C, F>(grid: &[C], key: impl Fn(&C) -> RunKey + Sync + Send, table: &mut FrontierTable, run: F) -> usize
where
    C: Sync,
    F: Fn(&C) -> Result<Vec<FrontierPoint>> + Sync + Send,
{
    let done: BTreeSet<_> = table.points.iter().map(|p| p.run_key().ordered()).collect();
    let mut seen = done.clone();
    let todo: Vec<&C> = grid
        .iter()
        .filter(|c| seen.insert(key(c).ordered()))
        .collect();
    let results = par::map(&todo, |c| (key(c), run(c)));
    let executed = results.len();
    table.failures.retain(|f| !results.iter().any(|(k, _)| k.ordered() == f.key.ordered()));
    for (k, result) in results {
        let inserted = result.and_then(|points| {
            for p in points {
                table.insert(p)?;
            }
            Ok(())
        });
        if let Err(e) = inserted {
            log::warn!("sweep point {} λ_f={} λ_S={} failed: {e}", k.method, k.lambda_f, k.lambda_s);
            table.points.retain(|p| p.run_key().ordered() != k.ordered());
            table.failures.push(FailedRun {
                key: k,
                message: e.to_string(),
            });
        }
    }
    table.normalize();
    executed
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub b_conversion: f64,
    pub b_gwm: f64,
    /// Best GWM of `A` within the window.
    pub a_gwm: f64,
    pub a_matches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub a: Method,
    pub b: Method,
    pub split: SplitId,
    pub window: f64,
    pub comparisons: Vec<Comparison>,
    /// `B` points with no `A` point within the window.
    pub unmatched: usize,
    /// Share of comparisons where `A` reaches at least `B`'s GWM; `None`
    /// when nothing overlaps.
    pub fraction: Option<f64>,
}

/// For each `B` point, compares against the best `A` point whose conversion
/// lies within `±window`.
pub fn dominance_check(table: &FrontierTable, a: Method, b: Method, split: SplitId, window: f64) -> DominanceReport {
    let a_points = table.select(a, split);
    let mut comparisons = Vec::new();
    let mut unmatched = 0;
    for bp in table.select(b, split) {
        let near: Vec<&&FrontierPoint> = a_points
            .iter()
            .filter(|ap| (ap.conversion_rate - bp.conversion_rate).abs() <= window)
            .collect();
        if near.is_empty() {
            unmatched += 1;
            continue;
        }
        comparisons.push(Comparison {
            b_conversion: bp.conversion_rate,
            b_gwm: bp.gwm,
            a_gwm: near.iter().map(|p| p.gwm).fold(f64::NEG_INFINITY, f64::max),
            a_matches: near.len(),
        });
    }
    let fraction = (!comparisons.is_empty()).then(|| {
        comparisons.iter().filter(|c| c.a_gwm >= c.b_gwm).count() as f64 / comparisons.len() as f64
    });
    DominanceReport {
        a,
        b,
        split,
        window,
        comparisons,
        unmatched,
        fraction,
    }
}
