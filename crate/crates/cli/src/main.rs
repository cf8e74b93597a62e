mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msis_core::eval::{Scope, Variant};
use serde_json::Value;

use crate::config::CONFIG_ENV;

/// Reject-inference experiments with multi-stage interaction sequence
/// networks.
#[derive(Parser, Debug)]
#[command(name = "msis", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Comma-separated training and gradient-check seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Maximum training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Number of simulated applicants.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Directory with examples.csv (and counterfactuals.csv).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Parent directory for run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write into exactly this directory instead of a fresh run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    /// Corridor width.
    D,
    /// Entropy weight of the WS and GB targets.
    Gamma,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ScopeArg {
    ObservedOnly,
    FullPopulation,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::ObservedOnly => Scope::ObservedOnly,
            ScopeArg::FullPopulation => Scope::FullPopulation,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic funnel: examples.csv and counterfactuals.csv.
    Simulate,
    /// Train models over the configured seeds and test them.
    Train {
        /// `msis`, `single_task`, `single_task_entropy` or `flat_multitask`.
        /// Defaults to msis plus the configured baselines.
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Score checkpoints on the test split.
    Evaluate {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
    },
    /// Train the full model and its ablations.
    Ablate {
        /// Defaults to every variant.
        #[arg(long = "variant")]
        variants: Vec<Variant>,
    },
    /// Train MSIS over a grid of one hyperparameter.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
    },
    /// Compare analytic and finite-difference gradients of the objective.
    Gradcheck,
    /// Aggregate runs.csv files into a comparison table.
    Report {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Reference model for gains; defaults to the first configured
        /// baseline.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, value_enum)]
        scope: Option<ScopeArg>,
    },
}

fn overrides(c: &Common) -> anyhow::Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    if let Some(seeds) = &c.seeds {
        out.push(("train.seeds".into(), serde_json::to_value(seeds)?));
        out.push(("gradcheck.seeds".into(), serde_json::to_value(seeds)?));
    }
    if let Some(e) = c.epochs {
        out.push(("train.epochs".into(), e.into()));
    }
    if let Some(n) = c.n {
        out.push(("sim.n".into(), n.into()));
    }
    if let Some(d) = &c.data {
        out.push(("paths.data".into(), d.display().to_string().into()));
    }
    if let Some(o) = &c.out {
        out.push(("paths.output".into(), o.display().to_string().into()));
    }
    for s in &c.set {
        out.push(config::parse_override(s)?);
    }
    Ok(out)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let config = config::load(cli.common.config.as_deref(), &overrides(&cli.common)?)?;
    let run_dir = cli.common.run_dir.as_deref();
    match cli.command {
        Command::Simulate => commands::simulate(&config, run_dir),
        Command::Train { models } => commands::train(&config, &models, run_dir),
        Command::Evaluate { checkpoint } => commands::evaluate(&config, &checkpoint, run_dir),
        Command::Ablate { variants } => commands::ablate(&config, &variants, run_dir),
        Command::Sweep { param } => commands::sweep(&config, param == SweepParam::D, run_dir),
        Command::Gradcheck => commands::gradcheck(&config, run_dir),
        Command::Report {
            input,
            baseline,
            scope,
        } => commands::report(&config, &input, baseline, scope.map(Scope::from), run_dir),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
