use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use elastic_pricing::commands;
use elastic_pricing::config::RunConfig;
use elastic_pricing::eval::Method;
use elastic_pricing::synth::SynthConfig;
use elastic_pricing::{Error, Result};

#[derive(Parser)]
#[command(name = "elastic-pricing", version, about = "Commercial premium optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Optigrad,
    FairOptigrad,
    Individual,
    Indirect,
    Discrete,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Optigrad => Method::OptiGrad,
            MethodArg::FairOptigrad => Method::FairOptiGrad,
            MethodArg::Individual => Method::Individual,
            MethodArg::Indirect => Method::Indirect,
            MethodArg::Discrete => Method::Discrete,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic portfolio. With --config, writes to `data.path` from
    /// the `[synth]` section; otherwise writes quotes.csv and config.toml to --out.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of records (quickstart mode).
        #[arg(long, default_value_t = 10_000)]
        n: usize,
    },
    /// Validate, split and encode the dataset into the binary cache.
    Ingest(Common),
    /// Fit the logistic conversion model on the training split.
    FitConversion(Common),
    /// Select or fit the technical premium model.
    FitPremium(Common),
    /// Run one pricing method at the configured lambdas.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Run the configured hyperparameter grid into a frontier table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Keep finished points of an existing table.
        #[arg(long)]
        resume: bool,
    },
    /// Plots, dominance checks and test diagnostics from the frontier table.
    Report(Common),
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed, n } => match config {
            Some(path) => {
                let mut cfg = RunConfig::load(&path)?;
                if let Some(out) = out {
                    cfg.out_dir = out;
                }
                if let Some(seed) = seed {
                    cfg.synth.get_or_insert_with(SynthConfig::default).seed = seed;
                }
                let p = commands::synth(&cfg)?;
                println!("wrote {}", p.display());
            }
            None => {
                let out = out.ok_or_else(|| Error::Config("synth needs --config or --out".into()))?;
                let scfg = SynthConfig {
                    n,
                    seed: seed.unwrap_or(0),
                    ..SynthConfig::default()
                };
                let p = commands::synth_quickstart(&out, &scfg)?;
                println!("wrote {}", p.display());
            }
        },
        Command::Ingest(c) => {
            let p = commands::ingest(&load(&c)?)?;
            println!(
                "{} rows accepted, {} rejected; split {:?}",
                p.report.accepted,
                p.report.rejected_total(),
                p.split.sizes()
            );
        }
        Command::FitConversion(c) => {
            let m = commands::fit_conversion_cmd(&load(&c)?)?;
            println!("conversion model fitted, w_p = {:.4}", m.w_p);
        }
        Command::FitPremium(c) => {
            commands::fit_premium_cmd(&load(&c)?)?;
            println!("premium model written");
        }
        Command::Optimize { common, method } => {
            let dir = commands::optimize(&load(&common)?, method.into())?;
            println!("wrote {}", dir.display());
        }
        Command::Sweep { common, resume } => {
            let s = commands::sweep(&load(&common)?, resume)?;
            println!(
                "sweep: {} runs executed, {} skipped, {} failed, {} points",
                s.executed, s.skipped, s.failed, s.points
            );
        }
        Command::Report(c) => {
            let dir = commands::report(&load(&c)?)?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
