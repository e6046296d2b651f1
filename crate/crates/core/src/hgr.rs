//! Neural estimate of the Hirschfeld–Gebelein–Rényi maximal correlation.
//!
//! Two small networks, `φ` on the commercial price and `ψ` on the sensitive
//! attribute, are standardized on every batch (zero mean, unit variance) so
//! that `mean(φ̂ · ψ̂)` is the Pearson correlation of the transformed
//! variables. Maximizing it over both networks estimates the maximal
//! correlation; the same expression, with the networks frozen, is the
//! differentiable fairness penalty seen by the coefficient model.

use serde::{Deserialize, Serialize};

use crate::diff::{mean, sum, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::models::MlpModel;

/// Variance floor used by [`standardize_batch`]: `std = sqrt(var + EPS²)`.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Standardized<T> {
    pub values: Vec<T>,
    /// Batch variance fell under the floor; outputs are (near) zero.
    pub degenerate: bool,
}

/// Zero-mean, unit-variance rescaling of a batch, differentiable through the
/// batch mean and standard deviation.
pub fn standardize_batch<T: Real>(xs: &[T]) -> Result<Standardized<T>> {
    if xs.len() < 2 {
        return Err(Error::Validation(format!(
            "standardization needs at least 2 values, got {}",
            xs.len()
        )));
    }
    let m = mean(xs);
    let centered: Vec<T> = xs.iter().map(|&x| x - m).collect();
    let squares: Vec<T> = centered.iter().map(|&c| c * c).collect();
    let var = mean(&squares);
    let degenerate = var.value() < STD_EPS * STD_EPS;
    let std = (var + STD_EPS * STD_EPS).sqrt();
    Ok(Standardized {
        values: centered.iter().map(|&c| c / std).collect(),
        degenerate,
    })
}

/// Fixed affine input normalization captured when an adversary is built.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn fit(values: impl Iterator<Item = f64>) -> Self {
        let vals: Vec<f64> = values.collect();
        let n = vals.len().max(1) as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Scaler {
            mean,
            std: if var > 0.0 { var.sqrt() } else { 1.0 },
        }
    }

    fn apply<T: Real>(&self, x: T) -> T {
        (x - self.mean) * (1.0 / self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    pub hidden: usize,
    pub lr_phi: f64,
    pub lr_psi: f64,
    /// Ascent steps per coefficient update.
    pub n_a: usize,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            hidden: 16,
            lr_phi: 0.05,
            lr_psi: 0.05,
            n_a: 5,
        }
    }
}

/// `φ` and `ψ` with their input scalers.
///
/// `ψ` may take a k-dimensional sensitive input; sensitive batches are then
/// row-major with `k` values per record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryPair {
    pub phi: MlpModel,
    pub psi: MlpModel,
    pub phi_scaler: Scaler,
    pub psi_scalers: Vec<Scaler>,
}

/// Value of `mean(φ̂ · ψ̂)` on one batch.
#[derive(Clone, Copy, Debug)]
pub struct HgrBatch<T> {
    pub value: T,
    pub degenerate: bool,
}

impl AdversaryPair {
    /// Builds a pair whose input scalers are fitted on reference data.
    pub fn new(hidden: usize, u_ref: &[f64], v_ref: &[f64], psi_dim: usize, seed: u64) -> Self {
        assert!(psi_dim > 0 && v_ref.len().is_multiple_of(psi_dim), "sensitive batch is not n × k");
        let psi_scalers = (0..psi_dim)
            .map(|j| Scaler::fit(v_ref.iter().skip(j).step_by(psi_dim).copied()))
            .collect();
        AdversaryPair {
            phi: MlpModel::new(vec![1, hidden, 1], seed.wrapping_mul(2).wrapping_add(1)),
            psi: MlpModel::new(vec![psi_dim, hidden, 1], seed.wrapping_mul(2).wrapping_add(2)),
            phi_scaler: Scaler::fit(u_ref.iter().copied()),
            psi_scalers,
        }
    }

    pub fn psi_dim(&self) -> usize {
        self.psi.input_dim()
    }

    /// `mean(φ̂(u) · ψ̂(v))` with explicit parameter vectors.
    pub fn objective<T: Real>(
        &self,
        phi_params: &[T],
        psi_params: &[T],
        u: &[T],
        v: &[T],
    ) -> Result<HgrBatch<T>> {
        let k = self.psi_dim();
        if v.len() != u.len() * k {
            return Err(Error::Validation(format!(
                "price batch of {} does not match sensitive batch of {} × {k}",
                u.len(),
                v.len() / k.max(1)
            )));
        }
        let phi_out: Vec<T> = u
            .iter()
            .map(|&p| self.phi.forward(phi_params, &[self.phi_scaler.apply(p)]))
            .collect();
        let psi_out: Vec<T> = v
            .chunks(k)
            .map(|row| {
                let scaled: Vec<T> = row
                    .iter()
                    .zip(&self.psi_scalers)
                    .map(|(&s, sc)| sc.apply(s))
                    .collect();
                self.psi.forward(psi_params, &scaled)
            })
            .collect();
        let phi_hat = standardize_batch(&phi_out)?;
        let psi_hat = standardize_batch(&psi_out)?;
        let prods: Vec<T> = phi_hat
            .values
            .iter()
            .zip(&psi_hat.values)
            .map(|(&a, &b)| a * b)
            .collect();
        let value = sum(&prods) / u.len() as f64;
        if !value.value().is_finite() {
            return Err(crate::Error::Numerical("non-finite HGR batch estimate".into()));
        }
        debug_assert!(value.value().abs() <= 1.0 + 1e-9, "|E[φ̂ψ̂]| > 1: {}", value.value());
        Ok(HgrBatch {
            value,
            degenerate: phi_hat.degenerate || psi_hat.degenerate,
        })
    }

    /// Objective at the current parameters.
    pub fn estimate(&self, u: &[f64], v: &[f64]) -> Result<HgrBatch<f64>> {
        self.objective(&self.phi.params, &self.psi.params, u, v)
    }

    /// One gradient-ascent step on both networks. Returns the objective at
    /// the parameters before the step. Prices enter as constants, so nothing
    /// upstream of them is touched.
    pub fn ascent_step(
        &mut self,
        tape: &mut Tape,
        u: &[f64],
        v: &[f64],
        lr_phi: f64,
        lr_psi: f64,
    ) -> Result<f64> {
        tape.clear();
        let (value, g_phi, g_psi) = {
            let phi = tape.vars(&self.phi.params);
            let psi = tape.vars(&self.psi.params);
            let uu = tape.vars(u);
            let vv = tape.vars(v);
            let obj = self.objective(&phi, &psi, &uu, &vv)?;
            let grads = tape
                .backward(obj.value)
                .map_err(|e| Error::eval_in(e, "adversary ascent"))?;
            (obj.value.value(), grads.collect(&phi), grads.collect(&psi))
        };
        for (w, g) in self.phi.params.iter_mut().zip(&g_phi) {
            *w += lr_phi * g;
        }
        for (w, g) in self.psi.params.iter_mut().zip(&g_psi) {
            *w += lr_psi * g;
        }
        Ok(value)
    }

    /// Fairness penalty `mean(φ̂(p) · ψ̂(s))` on a differentiable price batch.
    ///
    /// The adversary parameters are placed on the tape as fresh leaves whose
    /// gradients are discarded, so the only path to the coefficient
    /// parameters is through `prices`.
    pub fn penalty<'t>(&self, prices: &[Var<'t>], v: &[f64]) -> Result<HgrBatch<Var<'t>>> {
        let tape = prices
            .first()
            .ok_or_else(|| Error::Validation("empty price batch".into()))?
            .tape();
        let phi = tape.vars(&self.phi.params);
        let psi = tape.vars(&self.psi.params);
        let vv = tape.vars(v);
        self.objective(&phi, &psi, prices, &vv)
    }

    /// Negates φ's output layer, flipping the sign of the objective.
    pub fn negate_phi(&mut self) {
        let sizes = &self.phi.sizes;
        let last_in = sizes[sizes.len() - 2];
        let n = self.phi.params.len();
        for w in &mut self.phi.params[n - last_in - 1..] {
            *w = -*w;
        }
    }
}

/// Metric-mode settings: a fresh pair trained to a plateau.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HgrConfig {
    pub hidden: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub window: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for HgrConfig {
    fn default() -> Self {
        HgrConfig {
            hidden: 16,
            lr: 0.1,
            max_steps: 2000,
            window: 100,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HgrEstimate {
    pub value: f64,
    pub n_used: usize,
    pub converged: bool,
    pub steps: usize,
}

/// Maximal-correlation estimate between two samples.
///
/// Trains a freshly initialized pair by full-batch gradient ascent until the
/// best `|mean(φ̂ψ̂)|` has not improved by `tolerance` for `window` steps, or
/// until `max_steps`. Deterministic given `config.seed`.
pub fn hgr_metric(u: &[f64], v: &[f64], config: &HgrConfig) -> Result<HgrEstimate> {
    if u.len() != v.len() {
        return Err(Error::Validation(format!(
            "hgr_metric needs equal lengths, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    if u.len() < 50 {
        return Err(Error::Validation(format!(
            "hgr_metric needs at least 50 samples, got {}",
            u.len()
        )));
    }
    let mut pair = AdversaryPair::new(config.hidden, u, v, 1, config.seed);
    let mut tape = Tape::with_capacity(u.len() * 180);
    let mut best = 0.0f64;
    let mut last_improvement = 0;
    let mut converged = false;
    let mut steps = 0;
    for step in 0..config.max_steps {
        let value = pair.ascent_step(&mut tape, u, v, config.lr, config.lr)?.abs();
        steps = step + 1;
        if value > best + config.tolerance {
            best = value;
            last_improvement = step;
        } else if value > best {
            best = value;
        }
        if step - last_improvement >= config.window {
            converged = true;
            break;
        }
    }
    let final_value = pair.estimate(u, v)?.value.abs();
    Ok(HgrEstimate {
        value: best.max(final_value).min(1.0),
        n_used: u.len(),
        converged,
        steps,
    })
}
