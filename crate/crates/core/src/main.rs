use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attn_pgd::experiment::{self, ExperimentConfig, Summary};

/// Preconditioned gradient descent for softmax self-attention: experiments.
#[derive(Parser)]
#[command(name = "attn-pgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Spectral-init preconditioned descent vs random-init SGD at (p, d, n) = (20, 10, 500).
    ReproduceAppendixA(CommonArgs),
    /// Oracle bias vs sample size and optimization error vs iterations.
    Scaling(CommonArgs),
    /// One-point convexity and smoothness checks around the minimizing manifold.
    Landscape(CommonArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Stop training runs once the population excess drops below this value.
    #[arg(long)]
    early_stop_excess: Option<f64>,
}

impl CommonArgs {
    fn resolve(&self) -> attn_pgd::error::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(trials) = self.trials {
            config.trials = trials;
        }
        if self.early_stop_excess.is_some() {
            config.appendix.early_stop_excess = self.early_stop_excess;
        }
        config.validate()?;
        Ok(config)
    }
}

fn report(summary: &Summary) -> ExitCode {
    println!("{}", summary.command);
    for c in &summary.criteria {
        println!("  {}", c.line());
    }
    if summary.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, command): (&CommonArgs, fn(&ExperimentConfig) -> attn_pgd::error::Result<Summary>) = match &cli.command {
        Command::ReproduceAppendixA(a) => (a, experiment::reproduce_appendix_a),
        Command::Scaling(a) => (a, experiment::scaling),
        Command::Landscape(a) => (a, experiment::landscape),
        Command::Gradcheck(a) => (a, experiment::gradcheck),
    };
    let result = args.resolve().and_then(|config| command(&config));
    match result {
        Ok(summary) => report(&summary),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
