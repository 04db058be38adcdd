use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use richmon::experiments::{run_experiment, ExperimentConfig, ExperimentKind, RunOutcome};

#[derive(Parser, Debug)]
#[command(name = "richmon", version, about = "Contract-cost and convergence-rate experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment configuration; each subcommand has a built-in default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log solver progress.
    #[arg(long, global = true)]
    verbose: bool,
    /// Parallel width; defaults to the number of CPUs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Cost table for the two fixed cutoffs, utility-linear and optimal contracts.
    Figure1,
    /// Gap sequence of one contract family against its theoretical rate.
    Rates,
    /// Optimal contracts with solver diagnostics and the limit shape.
    SecondBest,
    /// Optimal linear schedules and the 1/n gap scaling.
    Linear,
    /// Compare two technologies by their error exponent.
    Rank,
    /// Binary-contract rates under limited liability against the baseline.
    LimitedLiability,
    /// Sequential binary contracts over several periods.
    Adjustable,
    /// Every oracle check plus the randomized divergence properties.
    OracleSuite,
    /// Run whatever kind the configuration names; requires --config.
    Run,
}

impl Command {
    fn kind(self) -> Option<ExperimentKind> {
        Some(match self {
            Self::Figure1 => ExperimentKind::Figure1,
            Self::Rates => ExperimentKind::Rates,
            Self::SecondBest => ExperimentKind::SecondBest,
            Self::Linear => ExperimentKind::Linear,
            Self::Rank => ExperimentKind::Rank,
            Self::LimitedLiability => ExperimentKind::LimitedLiability,
            Self::Adjustable => ExperimentKind::Adjustable,
            Self::OracleSuite => ExperimentKind::OracleSuite,
            Self::Run => return None,
        })
    }
}

fn builtin(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Figure1 => include_str!("../../../configs/figure1.json"),
        ExperimentKind::Rates => include_str!("../../../configs/rates.json"),
        ExperimentKind::SecondBest => include_str!("../../../configs/second_best.json"),
        ExperimentKind::Linear => include_str!("../../../configs/linear.json"),
        ExperimentKind::Rank => include_str!("../../../configs/rank.json"),
        ExperimentKind::LimitedLiability => include_str!("../../../configs/limited_liability.json"),
        ExperimentKind::Adjustable => include_str!("../../../configs/adjustable.json"),
        ExperimentKind::OracleSuite => include_str!("../../../configs/oracle_suite.json"),
    }
}

fn load(cmd: Command, common: &Common) -> anyhow::Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => match cmd.kind() {
            Some(kind) => ExperimentConfig::from_json(builtin(kind))?,
            None => bail!("`run` needs --config"),
        },
    };
    if let Some(kind) = cmd.kind() {
        if cfg.kind != kind {
            bail!("configuration is for `{}`, not `{}`", cfg.kind.name(), kind.name());
        }
    }
    Ok(cfg)
}

fn report(cfg: &ExperimentConfig, out: &std::path::Path, outcome: &RunOutcome) {
    println!("{} -> {}", cfg.kind.name(), out.display());
    for line in &outcome.summary {
        println!("  {line}");
    }
    for v in &outcome.verdicts {
        println!("  [{}] {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    if let Some(j) = cli.common.jobs {
        if j == 0 {
            bail!("--jobs must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    let cfg = load(cli.command, &cli.common)?;
    let out = cli.common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let outcome = run_experiment(&cfg, Some(&out))?;
    report(&cfg, &out, &outcome);
    Ok(outcome.all_pass())
}
