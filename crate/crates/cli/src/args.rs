use std::path::PathBuf;

use brightside::kernels::KernelKind;
use clap::{Args, Parser, Subcommand};

use crate::commands::{cmd_experiment, cmd_sample, cmd_tune, experiment_dir};
use crate::config::{ExperimentConfig, Overrides, Preset};
use crate::error::{CliError, Result};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "BRIGHTSIDE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "brightside", version, about = "Sub-Cauchy projection sampler experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one chain; writes samples.csv and report.json.
    Sample(RunArgs),
    /// Fit the projection parameters; writes tune.json.
    Tune(RunArgs),
    /// Compare the preset's samplers against its reference; writes
    /// <out>/<preset>/.
    Experiment(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long = "ell-o")]
    pub ell_o: Option<f64>,
    /// scs, sps, rwm or hmc.
    #[arg(long)]
    pub kernel: Option<KernelKind>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use the full-size problem settings instead of desk-scale defaults.
    #[arg(long)]
    pub paper_scale: bool,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Skip the tuner and use the centred projection.
    #[arg(long)]
    pub no_tune: bool,
    /// Regression data CSV (columns x_1..x_d, y).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Print the resolved configuration and planned work, then exit.
    #[arg(long)]
    pub dry_run: bool,
}

impl RunArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            preset: self.preset,
            config: self.config.clone(),
            seed: self.seed,
            iterations: self.iters,
            burnin: self.burnin,
            thinning: self.thin,
            ell_o: self.ell_o,
            kernel: self.kernel,
            out: self.out.clone(),
            paper_scale: self.paper_scale,
            dim: self.dim,
            replicates: self.replicates,
            no_tune: self.no_tune,
            data: self.data.clone(),
        }
    }
}

/// Applies `BRIGHTSIDE_THREADS` when set.
pub fn configure_threads(value: Option<String>) -> Result<()> {
    let Some(raw) = value else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    brightside::par::init_threads(n);
    Ok(())
}

/// Executes a parsed command line. Success messages go to stdout.
pub fn run(cli: Cli) -> Result<()> {
    configure_threads(std::env::var(THREADS_ENV).ok())?;
    let (args, name) = match &cli.command {
        Command::Sample(a) => (a, "sample"),
        Command::Tune(a) => (a, "tune"),
        Command::Experiment(a) => (a, "experiment"),
    };
    let cfg = ExperimentConfig::resolve(&args.overrides())?;
    if args.dry_run {
        let plan = serde_json::json!({
            "command": name,
            "config": cfg,
            "planned_iterations": cfg.planned_iterations(),
            "threads": brightside::par::current_num_threads(),
        });
        println!("{}", serde_json::to_string_pretty(&plan).map_err(CliError::runtime)?);
        return Ok(());
    }
    match cli.command {
        Command::Sample(_) => {
            let r = cmd_sample(&cfg)?;
            println!(
                "{} samples written to {} (acceptance {:.3})",
                r.kept,
                cfg.out.join("samples.csv").display(),
                r.acceptance_rate
            );
        }
        Command::Tune(_) => {
            let r = cmd_tune(&cfg)?;
            let last = r.objective_trace.last().copied().unwrap_or(f64::NAN);
            println!("tune.json written to {} (final objective {last:.4})", cfg.out.display());
        }
        Command::Experiment(_) => {
            let s = cmd_experiment(&cfg)?;
            for m in &s.methods {
                match &m.metrics {
                    Some(x) => println!(
                        "{:>4}: max rel err {:.4} (tails {:.4}), acceptance {:.3}",
                        m.method.name(),
                        x.max_rel_err,
                        x.max_rel_err_tails,
                        x.acceptance_rate
                    ),
                    None => println!("{:>4}: failed", m.method.name()),
                }
            }
            println!("results in {}", experiment_dir(&cfg).display());
        }
    }
    Ok(())
}
