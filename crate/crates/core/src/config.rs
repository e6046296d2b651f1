//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ColumnMapping;
use crate::error::{Error, Result};
use crate::eval::{FairnessConfig, Method};
use crate::models::ConversionFitConfig;
use crate::pipeline::MethodSettings;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV path, relative to the config file unless absolute.
    pub path: PathBuf,
    pub mapping: ColumnMapping,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
    /// Sensitive attribute used for fairness training and scoring.
    #[serde(default)]
    pub sensitive: Option<String>,
}

fn default_ratios() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PremiumSource {
    /// Use the mapping's premium column.
    #[default]
    Column,
    /// Fit a log-link model on historical prices.
    Fitted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PremiumConfig {
    pub source: PremiumSource,
    pub ridge: f64,
}

impl Default for PremiumConfig {
    fn default() -> Self {
        PremiumConfig {
            source: PremiumSource::Column,
            ridge: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub lambda_f: Vec<f64>,
    /// Only used by `fair-optigrad`; other methods run at `λ_S = 0`.
    pub lambda_s: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Compute RDC / HGR / Pearson for every point.
    pub fairness: bool,
    /// Conversion window of the dominance check.
    pub window: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            methods: vec![Method::OptiGrad, Method::Individual, Method::Indirect],
            lambda_f: vec![0.0, 1.0, 5.0, 25.0],
            lambda_s: vec![0.0],
            seeds: vec![0],
            fairness: false,
            window: 0.005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for sweeps; 0 picks the number of cores.
    #[serde(default)]
    pub jobs: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub conversion: ConversionFitConfig,
    #[serde(default)]
    pub premium: PremiumConfig,
    #[serde(default)]
    pub method: MethodSettings,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub fairness: FairnessConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            if cfg.data.path.is_relative() {
                cfg.data.path = dir.join(&cfg.data.path);
            }
            if cfg.out_dir.is_relative() {
                cfg.out_dir = dir.join(&cfg.out_dir);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.mapping.validate(None)?;
        if let Some(s) = &self.data.sensitive {
            if !self.data.mapping.sensitive_columns.iter().any(|c| &c.name == s) {
                return Err(Error::Config(format!(
                    "data.sensitive `{s}` is not listed in mapping.sensitive_columns"
                )));
            }
        }
        let t = &self.method.train;
        t.validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if self.sweep.lambda_f.iter().chain(&self.sweep.lambda_s).any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("sweep lambdas must be finite and non-negative".into()));
        }
        if self.sweep.methods.is_empty() || self.sweep.lambda_f.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        if self.premium.source == PremiumSource::Column && self.data.mapping.premium_column.is_none() {
            return Err(Error::Config(
                "premium.source = \"column\" needs mapping.premium_column".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [data]
        path = "quotes.csv"
        [data.mapping]
        feature_columns = ["x0", "x1"]
        sale_column = "sale"
        price_column = "price"
        premium_column = "premium"
    "#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.data.ratios, [0.6, 0.2, 0.2]);
        assert_eq!(cfg.method.train.a, 1.2);
        assert_eq!(cfg.method.train.b, 1.6);
        assert_eq!(cfg.method.boost.trees, 300);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[method.train]\nlambda_x = 3.0\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Toml(_))));
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        let text = format!("{MINIMAL}\n[method.train]\na = 1.6\nb = 1.2\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let mut a = RunConfig::from_toml(MINIMAL).unwrap();
        let h = a.hash();
        a.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), h);
        a.seed = 9;
        assert_ne!(a.hash(), h);
    }
}
