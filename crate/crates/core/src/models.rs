//! Conversion, pure-premium and coefficient models.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{sigmoid, Real};
use crate::data::PortfolioRecord;
use crate::error::{Error, Result};

/// Raw scores are clamped to this magnitude before the sigmoid so that the
/// bounded coefficient never rounds onto `a` or `b`.
pub const RAW_LIMIT: f64 = 30.0;

/// Coefficient interval `(a, b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::Config(format!(
                "coefficient bounds need a < b, got ({lower}, {upper})"
            )));
        }
        Ok(Bounds { lower, upper })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains_open(&self, c: f64) -> bool {
        c > self.lower && c < self.upper
    }

    pub fn contains_closed(&self, c: f64) -> bool {
        c >= self.lower && c <= self.upper
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            lower: 1.2,
            upper: 1.6,
        }
    }
}

/// Fully connected network with tanh hidden layers and a scalar linear output.
///
/// Parameters are one flat vector; each layer stores its weight matrix
/// row-major (`out × in`) followed by its bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl MlpModel {
    /// `sizes` runs from the input width to the final `1`.
    pub fn new(sizes: Vec<usize>, seed: u64) -> Self {
        assert!(sizes.len() >= 2 && *sizes.last().unwrap() == 1, "MLP must end in one output");
        assert!(sizes.iter().all(|&s| s > 0), "layer widths must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::param_count(&sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let r = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                params.push(rng.random_range(-r..r));
            }
        }
        MlpModel { sizes, params }
    }

    pub fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    fn check(&self) -> Result<()> {
        if self.sizes.len() < 2 || *self.sizes.last().unwrap() != 1 {
            return Err(Error::Validation("MLP must end in a single output".into()));
        }
        if self.params.len() != Self::param_count(&self.sizes) {
            return Err(Error::Validation(format!(
                "MLP with sizes {:?} needs {} parameters, found {}",
                self.sizes,
                Self::param_count(&self.sizes),
                self.params.len()
            )));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("MLP parameters must be finite".into()));
        }
        Ok(())
    }

    fn run<T: Real>(&self, params: &[T], first: impl Fn(usize, T) -> T) -> T {
        debug_assert_eq!(params.len(), self.params.len());
        let layers = self.sizes.len() - 1;
        let mut offset = 0;
        let mut act: Vec<T> = Vec::new();
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[offset..offset + n_in * n_out];
            let b = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut next = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut z = b[o];
                for (j, &wj) in row.iter().enumerate() {
                    z = z + if l == 0 { first(j, wj) } else { wj * act[j] };
                }
                next.push(if l + 1 < layers { z.tanh() } else { z });
            }
            act = next;
        }
        act[0]
    }

    /// Forward pass on a data vector.
    pub fn forward_data<T: Real>(&self, params: &[T], x: &[f64]) -> T {
        debug_assert_eq!(x.len(), self.input_dim());
        self.run(params, |j, w| w * x[j])
    }

    /// Forward pass on a differentiable input.
    pub fn forward<T: Real>(&self, params: &[T], input: &[T]) -> T {
        debug_assert_eq!(input.len(), self.input_dim());
        self.run(params, |j, w| w * input[j])
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.forward_data(&self.params, x)
    }
}

/// `w · x + bias`, parameters laid out as `[w..., bias]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub params: Vec<f64>,
}

impl LinearModel {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = 1.0 / (dim.max(1) as f64).sqrt();
        LinearModel {
            params: (0..=dim).map(|_| rng.random_range(-r..r)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.params.len() - 1
    }

    pub fn forward_data<T: Real>(&self, params: &[T], x: &[f64]) -> T {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        let mut z = params[d];
        for (j, &xj) in x.iter().enumerate() {
            z = z + params[j] * xj;
        }
        z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CoefficientInner {
    Linear(LinearModel),
    Mlp(MlpModel),
}

/// Bounded coefficient `ĉ(x) = σ(raw(x))·(b − a) + a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientModel {
    pub inner: CoefficientInner,
    pub bounds: Bounds,
}

impl CoefficientModel {
    pub fn linear(dim: usize, bounds: Bounds, seed: u64) -> Self {
        CoefficientModel {
            inner: CoefficientInner::Linear(LinearModel::new(dim, seed)),
            bounds,
        }
    }

    pub fn mlp(dim: usize, hidden: &[usize], bounds: Bounds, seed: u64) -> Self {
        let mut sizes = vec![dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        CoefficientModel {
            inner: CoefficientInner::Mlp(MlpModel::new(sizes, seed)),
            bounds,
        }
    }

    pub fn params(&self) -> &[f64] {
        match &self.inner {
            CoefficientInner::Linear(m) => &m.params,
            CoefficientInner::Mlp(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match &mut self.inner {
            CoefficientInner::Linear(m) => &mut m.params,
            CoefficientInner::Mlp(m) => &mut m.params,
        }
    }

    pub fn raw<T: Real>(&self, params: &[T], x: &[f64]) -> T {
        match &self.inner {
            CoefficientInner::Linear(m) => m.forward_data(params, x),
            CoefficientInner::Mlp(m) => m.forward_data(params, x),
        }
    }

    /// Maps a raw score into the coefficient interval.
    pub fn bound<T: Real>(&self, raw: T) -> T {
        raw.clamp(-RAW_LIMIT, RAW_LIMIT).sigmoid() * self.bounds.width() + self.bounds.lower
    }

    pub fn coefficient_with<T: Real>(&self, params: &[T], x: &[f64]) -> T {
        self.bound(self.raw(params, x))
    }

    pub fn coefficient(&self, x: &[f64]) -> f64 {
        self.coefficient_with(self.params(), x)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        Bounds::new(self.bounds.lower, self.bounds.upper)?;
        match &self.inner {
            CoefficientInner::Linear(m) => {
                if m.dim() != dim {
                    return Err(Error::Validation(format!(
                        "linear coefficient model expects {} features, data has {dim}",
                        m.dim()
                    )));
                }
            }
            CoefficientInner::Mlp(m) => {
                m.check()?;
                if m.input_dim() != dim {
                    return Err(Error::Validation(format!(
                        "MLP coefficient model expects {} features, data has {dim}",
                        m.input_dim()
                    )));
                }
            }
        }
        if self.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("coefficient parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Logistic demand model on encoded features and log price.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionModel {
    pub w_x: Vec<f64>,
    pub w_p: f64,
    pub bias: f64,
}

impl ConversionModel {
    /// Price-independent part of the logit.
    pub fn base(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.w_x.len());
        self.w_x.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    /// Conversion probability given the precomputed [`base`](Self::base).
    pub fn prob_from_base<T: Real>(&self, base: f64, price: T) -> T {
        (price.ln() * self.w_p + base).sigmoid()
    }

    pub fn predict(&self, x: &[f64], price: f64) -> Result<f64> {
        if !(price > 0.0) {
            return Err(Error::Domain(format!(
                "conversion model needs a positive price, got {price}"
            )));
        }
        Ok(sigmoid(self.base(x) + self.w_p * price.ln()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConversionFitConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for ConversionFitConfig {
    fn default() -> Self {
        ConversionFitConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 200,
            batch_size: 256,
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionFit {
    pub model: ConversionModel,
    pub train_log_loss: f64,
    pub dev_log_loss: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

fn log_loss(p: f64, y: bool) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean log-loss of `model` on `records` at their historical prices.
pub fn mean_log_loss(model: &ConversionModel, records: &[PortfolioRecord]) -> f64 {
    if records.is_empty() {
        return f64::NAN;
    }
    records
        .iter()
        .map(|r| log_loss(sigmoid(model.base(&r.x) + model.w_p * r.price_hist.ln()), r.sale))
        .sum::<f64>()
        / records.len() as f64
}

/// Mini-batch logistic regression with momentum and early stopping on dev.
///
/// Log price is standardized internally with training statistics and folded
/// back into `w_p` and `bias` on return.
pub fn fit_conversion(
    train: &[PortfolioRecord],
    dev: &[PortfolioRecord],
    cfg: &ConversionFitConfig,
) -> Result<ConversionFit> {
    if train.is_empty() {
        return Err(Error::Validation("conversion fit needs training records".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("conversion fit needs batch_size > 0 and learning_rate > 0".into()));
    }
    let d = train[0].x.len();
    let lp: Vec<f64> = train.iter().map(|r| r.price_hist.ln()).collect();
    let lp_mean = lp.iter().sum::<f64>() / lp.len() as f64;
    let lp_var = lp.iter().map(|v| (v - lp_mean).powi(2)).sum::<f64>() / lp.len() as f64;
    let lp_std = if lp_var > 0.0 { lp_var.sqrt() } else { 1.0 };

    // Internal layout: [w_x (d), w_p~, bias~].
    let unfold = |w: &[f64]| {
        let w_p = w[d] / lp_std;
        ConversionModel {
            w_x: w[..d].to_vec(),
            w_p,
            bias: w[d + 1] - w_p * lp_mean,
        }
    };
    let scaled_price = |r: &PortfolioRecord| (r.price_hist.ln() - lp_mean) / lp_std;

    let mut w = vec![0.0; d + 2];
    let mut velocity = vec![0.0; d + 2];
    let mut grad = vec![0.0; d + 2];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let monitor = if dev.is_empty() { train } else { dev };

    let mut best = (f64::INFINITY, w.clone(), 0);
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let r = &train[i];
                let zp = scaled_price(r);
                let z = r.x.iter().zip(&w[..d]).map(|(x, w)| x * w).sum::<f64>()
                    + w[d] * zp
                    + w[d + 1];
                let err = sigmoid(z) - if r.sale { 1.0 } else { 0.0 };
                for (g, x) in grad.iter_mut().zip(&r.x) {
                    *g += err * x;
                }
                grad[d] += err * zp;
                grad[d + 1] += err;
            }
            let scale = 1.0 / batch.len() as f64;
            for j in 0..d + 2 {
                velocity[j] = cfg.momentum * velocity[j] - cfg.learning_rate * grad[j] * scale;
                w[j] += velocity[j];
            }
        }
        let loss = mean_log_loss(&unfold(&w), monitor);
        if !loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "conversion log-loss became non-finite at epoch {epoch}; try a smaller learning_rate (currently {})",
                cfg.learning_rate
            )));
        }
        if loss < best.0 {
            best = (loss, w.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let model = unfold(&best.1);
    if model.w_p >= 0.0 {
        log::warn!(
            "fitted price weight w_p = {} is not negative; demand does not fall with price",
            model.w_p
        );
    }
    Ok(ConversionFit {
        train_log_loss: mean_log_loss(&model, train),
        dev_log_loss: mean_log_loss(&model, dev),
        model,
        epochs_run,
        best_epoch: best.2,
    })
}

/// Technical premium `h(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum PremiumModel {
    /// Read from the record's premium column.
    Column,
    /// `exp(w · x + bias)` fitted by least squares on log historical price.
    Fitted { weights: Vec<f64>, bias: f64 },
}

impl PremiumModel {
    pub fn premium(&self, record: &PortfolioRecord) -> Result<f64> {
        match self {
            PremiumModel::Column => record.premium.ok_or_else(|| {
                Error::Validation("record has no premium column value".into())
            }),
            PremiumModel::Fitted { weights, bias } => {
                let z = weights.iter().zip(&record.x).map(|(w, x)| w * x).sum::<f64>() + bias;
                Ok(z.exp())
            }
        }
    }

    pub fn premiums(&self, records: &[PortfolioRecord]) -> Result<Vec<f64>> {
        records.iter().map(|r| self.premium(r)).collect()
    }
}

/// Log-link linear premium model: ridge least squares of `ln(price_hist)` on `x`.
pub fn fit_premium(train: &[PortfolioRecord], ridge: f64) -> Result<PremiumModel> {
    if train.is_empty() {
        return Err(Error::Validation("premium fit needs training records".into()));
    }
    let d = train[0].x.len();
    let n = train.len();
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j < d { train[i].x[j] } else { 1.0 });
    let target = DVector::from_iterator(n, train.iter().map(|r| r.price_hist.ln()));
    let mut gram = design.transpose() * &design;
    for j in 0..d {
        gram[(j, j)] += ridge;
    }
    let rhs = design.transpose() * target;
    let sol = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or_else(|| Error::Numerical("premium normal equations are singular".into()))?;
    Ok(PremiumModel::Fitted {
        weights: sol.iter().take(d).copied().collect(),
        bias: sol[d],
    })
}
