//! Randomized Dependence Coefficient.
//!
//! Each variable is mapped through its empirical copula, projected through
//! `k` random affine maps followed by `sin`, and the largest canonical
//! correlation between the two feature sets is returned. Both arguments share
//! one projection matrix, and the pair is processed in a canonical order, so
//! `rdc(u, v) == rdc(v, u)` exactly.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RdcConfig {
    /// Number of random projections per variable.
    pub k: usize,
    /// Standard deviation of the projection coefficients.
    pub s: f64,
    pub seed: u64,
    /// Ridge added to both covariance blocks.
    pub regularization: f64,
}

impl Default for RdcConfig {
    fn default() -> Self {
        RdcConfig {
            k: 20,
            s: 1.0 / 6.0,
            seed: 0,
            regularization: 1e-8,
        }
    }
}

/// Normalized average ranks, `rank / n` with ties sharing their mean rank.
pub fn empirical_copula(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(Ordering::Equal));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && v[order[j]] == v[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            out[idx] = avg / n as f64;
        }
        i = j;
    }
    out
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len());
    let n = u.len() as f64;
    if u.is_empty() {
        return 0.0;
    }
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu <= 0.0 || svv <= 0.0 {
        0.0
    } else {
        suv / (suu * svv).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdcValue {
    /// Clipped into `[0, 1]`.
    pub value: f64,
    /// Largest canonical correlation before clipping.
    pub unclipped: f64,
}

fn sine_features(copula: &[f64], proj: &[(f64, f64)]) -> DMatrix<f64> {
    let n = copula.len();
    let k = proj.len();
    let mut m = DMatrix::from_fn(n, k, |i, j| (proj[j].0 * copula[i] + proj[j].1).sin());
    for j in 0..k {
        let mean = m.column(j).sum() / n as f64;
        m.column_mut(j).add_scalar_mut(-mean);
    }
    m
}

fn inverse_cholesky(c: DMatrix<f64>, side: &str) -> Result<DMatrix<f64>> {
    let eig = c.clone().symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let chol = c.cholesky().ok_or_else(|| {
        Error::Numerical(format!(
            "RDC {side} covariance is singular despite ridge (condition estimate {:.3e})",
            hi / lo.max(f64::MIN_POSITIVE)
        ))
    })?;
    let l = chol.l();
    l.solve_lower_triangular(&DMatrix::identity(l.nrows(), l.ncols()))
        .ok_or_else(|| Error::Numerical(format!("RDC {side} Cholesky factor is singular")))
}

pub fn rdc_detailed(u: &[f64], v: &[f64], config: &RdcConfig) -> Result<RdcValue> {
    if u.len() != v.len() {
        return Err(Error::Validation(format!(
            "rdc needs equal lengths, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    if u.len() < 20 {
        return Err(Error::Validation(format!("rdc needs at least 20 samples, got {}", u.len())));
    }
    if config.k == 0 || !(config.s > 0.0) {
        return Err(Error::Config("rdc needs k >= 1 and s > 0".into()));
    }
    let cu = empirical_copula(u);
    let cv = empirical_copula(v);
    let (first, second) = match cu.partial_cmp(&cv) {
        Some(Ordering::Greater) => (cv, cu),
        _ => (cu, cv),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let proj: Vec<(f64, f64)> = (0..config.k)
        .map(|_| {
            let w: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            (config.s * w, config.s * b)
        })
        .collect();

    let fx = sine_features(&first, &proj);
    let fy = sine_features(&second, &proj);
    let n1 = (u.len() - 1) as f64;
    let ridge = DMatrix::identity(config.k, config.k) * config.regularization;
    let cxx = fx.transpose() * &fx / n1 + &ridge;
    let cyy = fy.transpose() * &fy / n1 + &ridge;
    let cxy = fx.transpose() * &fy / n1;

    let wx = inverse_cholesky(cxx, "first")?;
    let wy = inverse_cholesky(cyy, "second")?;
    let m = wx * cxy * wy.transpose();
    let top = m
        .singular_values()
        .iter()
        .copied()
        .fold(0.0f64, f64::max);
    if top > 1.0 + 1e-6 {
        log::warn!("RDC canonical correlation {top} exceeds 1 before clipping");
    }
    Ok(RdcValue {
        value: top.clamp(0.0, 1.0),
        unclipped: top,
    })
}

pub fn rdc(u: &[f64], v: &[f64], config: &RdcConfig) -> Result<f64> {
    rdc_detailed(u, v, config).map(|r| r.value)
}
