//! Pipeline commands behind the command-line tool.
//!
//! Every command reads the run configuration, consumes artifacts written by
//! earlier commands under `out_dir`, writes its own artifacts there, and
//! records a manifest in `out_dir/manifests/<command>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{fit_indirect_ratebook, predict_indirect, BoostedTreeModel, IndividualSolution};
use crate::config::{PremiumSource, RunConfig};
use crate::data::{cache_meta, load_portfolio, read_cache, write_cache, CacheMeta, Portfolio, SplitId};
use crate::error::{Error, Result};
use crate::eval::{dominance_check, sweep as run_sweep, FrontierTable, Method, Provenance, RunKey};
use crate::models::{fit_conversion, fit_premium, mean_log_loss, CoefficientModel, ConversionModel, PremiumModel};
use crate::par;
use crate::pipeline::{evaluate, run_method, Artifact, MethodRun, Prepared, SPLITS};
use crate::plot::{fairness_chart, frontier_chart};
use crate::synth::{self, SynthConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub dataset_fingerprint: Option<String>,
    pub seed: u64,
    pub config: RunConfig,
    pub outputs: Vec<OutputFile>,
}

/// Collects written files for the manifest.
struct Outputs<'a> {
    root: &'a Path,
    files: Vec<OutputFile>,
}

impl<'a> Outputs<'a> {
    fn new(root: &'a Path) -> Self {
        Outputs { root, files: Vec::new() }
    }

    fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel.as_ref());
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes)?;
        self.files.push(OutputFile {
            path: rel.as_ref().to_string_lossy().replace('\\', "/"),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(path)
    }

    fn json<T: Serialize>(&mut self, rel: impl AsRef<Path>, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    fn finish(mut self, command: &str, cfg: &RunConfig, fingerprint: Option<String>) -> Result<()> {
        let manifest = Manifest {
            command: command.into(),
            version: VERSION.into(),
            config_hash: cfg.hash(),
            dataset_fingerprint: fingerprint,
            seed: cfg.seed,
            config: cfg.clone(),
            outputs: std::mem::take(&mut self.files),
        };
        self.json(format!("manifests/{command}.json"), &manifest)?;
        Ok(())
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<T> {
    let bytes = fs::read(path).map_err(|_| Error::MissingArtifact {
        path: path.to_path_buf(),
        hint: hint.into(),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

const CACHE: &str = "data/portfolio.bin";
const CACHE_META: &str = "data/portfolio.meta.json";
const CONVERSION: &str = "models/conversion.json";
const PREMIUM: &str = "models/premium.json";
const FRONTIER_JSON: &str = "sweep/frontier.json";

/// Writes a synthetic CSV to `data.path` using the `[synth]` section.
pub fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    let scfg = cfg.synth.clone().unwrap_or_default();
    let rows = synth::generate(&scfg)?;
    let csv = synth::to_csv(&scfg, &rows);
    if let Some(dir) = cfg.data.path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&cfg.data.path, csv.as_bytes())?;
    let out = Outputs::new(&cfg.out_dir);
    out.finish("synth", cfg, Some(hex::encode(Sha256::digest(csv.as_bytes()))))?;
    Ok(cfg.data.path.clone())
}

/// Starter configuration for a synthetic portfolio written next to it.
pub fn starter_config(synth_cfg: &SynthConfig) -> String {
    let mapping = synth::mapping(synth_cfg);
    let quoted = |v: &[String]| v.iter().map(|s| format!("\"{s}\"")).collect::<Vec<_>>().join(", ");
    format!(
        r#"out_dir = "out"
seed = 0

[data]
path = "quotes.csv"
ratios = [0.6, 0.2, 0.2]
split_seed = 0
sensitive = "age"

[data.mapping]
feature_columns = [{features}]
categorical_columns = ["region"]
sale_column = "sale"
price_column = "price"
premium_column = "premium"
id_column = "id"
sensitive_columns = [
  {{ name = "age", kind = "continuous" }},
  {{ name = "employed", kind = "binary" }},
]

[synth]
n = {n}
d = {d}
seed = {seed}

[method.train]
lambda_f = 0.0
lambda_s = 0.0
a = 1.2
b = 1.6
n_e = 100
batch_size = 256
alpha_c = 0.01

[sweep]
methods = ["optigrad", "individual", "indirect"]
lambda_f = [0.0, 1.0, 5.0, 25.0]
lambda_s = [0.0]
seeds = [0]
"#,
        features = quoted(&mapping.feature_columns),
        n = synth_cfg.n,
        d = synth_cfg.d,
        seed = synth_cfg.seed,
    )
}

/// Generates `quotes.csv` and `config.toml` in `dir`.
pub fn synth_quickstart(dir: &Path, synth_cfg: &SynthConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let rows = synth::generate(synth_cfg)?;
    fs::write(dir.join("quotes.csv"), synth::to_csv(synth_cfg, &rows))?;
    let config = dir.join("config.toml");
    fs::write(&config, starter_config(synth_cfg))?;
    Ok(config)
}

pub fn ingest(cfg: &RunConfig) -> Result<Portfolio> {
    let p = load_portfolio(&cfg.data.path, &cfg.data.mapping, cfg.data.ratios, cfg.data.split_seed)?;
    if p.is_empty() {
        return Err(Error::Validation("no valid rows in the dataset".into()));
    }
    let mut out = Outputs::new(&cfg.out_dir);
    let mut bin = Vec::new();
    write_cache(&p, &mut bin)?;
    out.write(CACHE, &bin)?;
    out.json(CACHE_META, &cache_meta(&p))?;
    out.json("data/preprocess_report.json", &p.report)?;
    out.finish("ingest", cfg, Some(p.fingerprint.clone()))?;
    log::info!(
        "ingested {} rows ({} rejected), split {:?}",
        p.report.accepted,
        p.report.rejected_total(),
        p.split.sizes()
    );
    Ok(p)
}

pub fn load_cached(cfg: &RunConfig) -> Result<Portfolio> {
    let meta: CacheMeta = read_json(&cfg.out_dir.join(CACHE_META), "run `ingest` first")?;
    let path = cfg.out_dir.join(CACHE);
    let file = fs::File::open(&path).map_err(|_| Error::MissingArtifact {
        path: path.clone(),
        hint: "run `ingest` first".into(),
    })?;
    read_cache(std::io::BufReader::new(file), meta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionMetrics {
    pub train_log_loss: f64,
    pub dev_log_loss: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub w_p: f64,
}

pub fn fit_conversion_cmd(cfg: &RunConfig) -> Result<ConversionModel> {
    let p = load_cached(cfg)?;
    let train = p.subset(SplitId::Train);
    let dev = p.subset(SplitId::Dev);
    let mut fit_cfg = cfg.conversion.clone();
    fit_cfg.seed = fit_cfg.seed.wrapping_add(cfg.seed);
    let fit = fit_conversion(&train, &dev, &fit_cfg)?;
    let mut out = Outputs::new(&cfg.out_dir);
    out.json(CONVERSION, &fit.model)?;
    out.json(
        "models/conversion_metrics.json",
        &ConversionMetrics {
            train_log_loss: fit.train_log_loss,
            dev_log_loss: fit.dev_log_loss,
            epochs_run: fit.epochs_run,
            best_epoch: fit.best_epoch,
            w_p: fit.model.w_p,
        },
    )?;
    out.finish("fit-conversion", cfg, Some(p.fingerprint))?;
    Ok(fit.model)
}

pub fn fit_premium_cmd(cfg: &RunConfig) -> Result<PremiumModel> {
    let p = load_cached(cfg)?;
    let model = match cfg.premium.source {
        PremiumSource::Column => PremiumModel::Column,
        PremiumSource::Fitted => fit_premium(&p.subset(SplitId::Train), cfg.premium.ridge)?,
    };
    // Fail now rather than at optimization time.
    model.premiums(&p.records)?;
    let mut out = Outputs::new(&cfg.out_dir);
    out.json(PREMIUM, &model)?;
    out.finish("fit-premium", cfg, Some(p.fingerprint))?;
    Ok(model)
}

fn sensitive_index(cfg: &RunConfig, p: &Portfolio) -> Result<Option<usize>> {
    cfg.data.sensitive.as_deref().map(|s| p.sensitive_index(s)).transpose()
}

/// Portfolio plus fitted models, ready for optimization.
pub fn prepare(cfg: &RunConfig) -> Result<(Portfolio, Prepared)> {
    let p = load_cached(cfg)?;
    let fmodel: ConversionModel = read_json(&cfg.out_dir.join(CONVERSION), "run `fit-conversion` first")?;
    let hmodel: PremiumModel = read_json(&cfg.out_dir.join(PREMIUM), "run `fit-premium` first")?;
    let sens = sensitive_index(cfg, &p)?;
    let prepared = Prepared::new(&p, fmodel, &hmodel, sens)?;
    Ok((p, prepared))
}

pub fn run_dir(key: &RunKey) -> PathBuf {
    PathBuf::from("optimize").join(format!(
        "{}-lf{}-ls{}-s{}",
        key.method, key.lambda_f, key.lambda_s, key.seed
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: SplitId,
    pub n: usize,
    pub gwm: f64,
    pub conversion_rate: f64,
    pub min_coefficient: f64,
    pub max_coefficient: f64,
}

/// Runs one method at the configured `λ_f`, `λ_S` and seed.
pub fn optimize(cfg: &RunConfig, method: Method) -> Result<PathBuf> {
    let (p, prepared) = prepare(cfg)?;
    let t = &cfg.method.train;
    let key = RunKey {
        method,
        lambda_f: t.lambda_f,
        lambda_s: if method == Method::FairOptiGrad { t.lambda_s } else { 0.0 },
        seed: cfg.seed,
    };
    let dir = run_dir(&key);
    let bounds = cfg.method.bounds()?;
    let mut out = Outputs::new(&cfg.out_dir);

    let run = if method == Method::Indirect {
        let ind_key = RunKey {
            method: Method::Individual,
            lambda_s: 0.0,
            ..key
        };
        let path = cfg.out_dir.join(run_dir(&ind_key)).join("solution_train.json");
        let targets: IndividualSolution = read_json(
            &path,
            &format!(
                "the indirect ratebook is fitted on an individual solution; run `optimize --method individual` with lambda_f = {} and seed {} first",
                key.lambda_f, key.seed
            ),
        )?;
        if targets.coefficients.len() != prepared.train.len() {
            return Err(Error::Validation("individual solution does not match the training split".into()));
        }
        let model = fit_indirect_ratebook(&prepared.train.x, &targets.coefficients, bounds, &cfg.method.boost)?;
        let coefficients = SPLITS
            .iter()
            .map(|&s| prepared.split(s).x.iter().map(|x| predict_indirect(&model, x)).collect())
            .collect();
        MethodRun {
            key,
            coefficients,
            artifact: Artifact::Indirect { model, targets },
        }
    } else {
        match run_method(&prepared, &key, &cfg.method) {
            Ok(run) => run,
            Err(Error::Aborted { player, reason, trace }) => {
                let path = out.write(dir.join("trace.csv"), trace.to_csv().as_bytes())?;
                return Err(Error::Divergence(format!(
                    "{player} update failed: {reason}; partial trace in {}",
                    path.display()
                )));
            }
            Err(e) => return Err(e),
        }
    };

    match &run.artifact {
        Artifact::Trained(outcome) => {
            out.json(dir.join("coefficient_model.json"), &outcome.model)?;
            out.json(dir.join("coefficient_model_final.json"), &outcome.final_model)?;
            if let Some(adv) = &outcome.adversary {
                out.json(dir.join("adversary.json"), adv)?;
            }
            out.write(dir.join("trace.csv"), outcome.trace.to_csv().as_bytes())?;
        }
        Artifact::Individual(sols) => {
            for (split, sol) in SPLITS.iter().zip(sols) {
                out.write(dir.join(format!("solution_{split}.csv")), sol.to_csv(None).as_bytes())?;
                out.json(dir.join(format!("solution_{split}.json")), sol)?;
            }
        }
        Artifact::Indirect { model, .. } => {
            out.json(dir.join("ratebook.json"), model)?;
        }
    }
    let points = evaluate(&prepared, &run, bounds, None)?;
    let metrics: Vec<SplitMetrics> = points
        .iter()
        .map(|pt| {
            let c = run.coefficients(pt.split);
            SplitMetrics {
                split: pt.split,
                n: pt.n,
                gwm: pt.gwm,
                conversion_rate: pt.conversion_rate,
                min_coefficient: c.iter().copied().fold(f64::INFINITY, f64::min),
                max_coefficient: c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    out.json(dir.join("metrics.json"), &metrics)?;
    out.finish(&format!("optimize-{method}"), cfg, Some(p.fingerprint))?;
    Ok(cfg.out_dir.join(dir))
}

/// Sweep grid in a fixed order.
pub fn sweep_keys(cfg: &RunConfig) -> Vec<RunKey> {
    let s = &cfg.sweep;
    let mut keys = Vec::new();
    for &method in &s.methods {
        let lambda_s: &[f64] = if method == Method::FairOptiGrad { &s.lambda_s } else { &[0.0] };
        for &seed in &s.seeds {
            for &lf in &s.lambda_f {
                for &ls in lambda_s {
                    keys.push(RunKey {
                        method,
                        lambda_f: lf,
                        lambda_s: ls,
                        seed,
                    });
                }
            }
        }
    }
    keys
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub points: usize,
}

pub fn sweep(cfg: &RunConfig, resume: bool) -> Result<SweepSummary> {
    let (p, prepared) = prepare(cfg)?;
    let bounds = cfg.method.bounds()?;
    let provenance = Provenance {
        config_hash: cfg.hash(),
        dataset_fingerprint: p.fingerprint.clone(),
        timestamp: 0,
    };
    let existing = cfg.out_dir.join(FRONTIER_JSON);
    let mut table = if resume && existing.exists() {
        let t: FrontierTable = read_json(&existing, "")?;
        if t.provenance.dataset_fingerprint != p.fingerprint {
            return Err(Error::Config(
                "existing frontier was computed on a different dataset; rerun without --resume".into(),
            ));
        }
        t
    } else {
        FrontierTable::new(provenance.clone())
    };
    let keys = sweep_keys(cfg);
    let fairness = cfg.sweep.fairness.then_some(&cfg.fairness);
    let executed = par::with_jobs(cfg.jobs, || {
        run_sweep(&keys, |k| *k, &mut table, |k| {
            let run = run_method(&prepared, k, &cfg.method)?;
            evaluate(&prepared, &run, bounds, fairness)
        })
    });
    table.provenance = provenance;
    let mut out = Outputs::new(&cfg.out_dir);
    out.write("sweep/frontier.csv", table.to_csv().as_bytes())?;
    out.json(FRONTIER_JSON, &table)?;
    out.finish("sweep", cfg, Some(p.fingerprint))?;
    let summary = SweepSummary {
        executed,
        skipped: keys.len() - executed,
        failed: table.failures.len(),
        points: table.points.len(),
    };
    if table.points.is_empty() {
        return Err(Error::Numerical(format!(
            "every sweep point failed ({} failures); see {}",
            table.failures.len(),
            existing.display()
        )));
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    /// Log-loss of the conversion model on test labels.
    pub conversion_log_loss: f64,
    pub observed_conversion: f64,
    pub n: usize,
}

/// Plots, dominance checks and test-split conversion diagnostics.
pub fn report(cfg: &RunConfig) -> Result<PathBuf> {
    let table: FrontierTable = read_json(&cfg.out_dir.join(FRONTIER_JSON), "run `sweep` first")?;
    let mut out = Outputs::new(&cfg.out_dir);
    let mut dominance = Vec::new();
    for split in SPLITS {
        out.write(format!("report/frontier_{split}.svg"), frontier_chart(&table, split).to_svg().as_bytes())?;
        if let Some(chart) = fairness_chart(&table, split) {
            out.write(format!("report/fairness_{split}.svg"), chart.to_svg().as_bytes())?;
        }
        for (a, b) in [
            (Method::OptiGrad, Method::Indirect),
            (Method::Individual, Method::Indirect),
            (Method::OptiGrad, Method::Individual),
        ] {
            if !table.select(a, split).is_empty() && !table.select(b, split).is_empty() {
                dominance.push(dominance_check(&table, a, b, split, cfg.sweep.window));
            }
        }
    }
    out.json("report/dominance.json", &dominance)?;

    // Only this command reads test labels.
    let p = load_cached(cfg)?;
    if let Ok(fmodel) = read_json::<ConversionModel>(&cfg.out_dir.join(CONVERSION), "") {
        let test = p.subset(SplitId::Test);
        if !test.is_empty() {
            out.json(
                "report/test_metrics.json",
                &TestMetrics {
                    conversion_log_loss: mean_log_loss(&fmodel, &test),
                    observed_conversion: test.iter().filter(|r| r.sale).count() as f64 / test.len() as f64,
                    n: test.len(),
                },
            )?;
        }
    }
    out.finish("report", cfg, Some(p.fingerprint))?;
    Ok(cfg.out_dir.join("report"))
}

/// Loads a saved coefficient model and checks it against the portfolio.
pub fn load_coefficient_model(path: &Path, dim: usize) -> Result<CoefficientModel> {
    let m: CoefficientModel = read_json(path, "no such coefficient model")?;
    m.validate(dim)?;
    Ok(m)
}

/// Loads a saved ratebook.
pub fn load_ratebook(path: &Path) -> Result<BoostedTreeModel> {
    read_json(path, "no such ratebook")
}
