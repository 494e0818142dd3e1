use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use icl_lab::cli::{self, Command, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "icl-lab", version, about = "In-context regression with softmax attention")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain attention parameters and record norm and test-error traces.
    Train(Common),
    /// Loss of M = w*I over a log grid of scales, with exponent fits.
    Sweep(Common),
    /// Pretraining on low-rank task classes with subspace recovery checks.
    Lowrank(Common),
    /// Pretrain on several classes and evaluate on one.
    Transfer(Common),
    /// Numerical checks of the concentration and measure bounds.
    Theory(Common),
    /// Analytic gradients against finite differences.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Start from a named preset instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds, counting up from the first one.
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads (outputs do not depend on this).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "L", value_delimiter = ',')]
    lipschitz: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    sigma: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    task: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    estimator: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    lr: Option<Vec<f64>>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    eval_tasks: Option<usize>,
    /// Contexts per grid point for `sweep`.
    #[arg(long)]
    contexts: Option<usize>,
}

impl Common {
    fn config(&self) -> icl_lab::error::Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => cli::load_config(path)?,
            (None, Some(name)) => cli::preset(name)?,
            (None, None) => ExperimentConfig::default(),
        };
        Overrides {
            seed: self.seed,
            trials: self.trials,
            lipschitz: self.lipschitz.clone(),
            n: self.n.clone(),
            sigma: self.sigma.clone(),
            task: self.task.clone(),
            covariates: self.covariates.clone(),
            estimator: self.estimator.clone(),
            lr: self.lr.clone(),
            iterations: self.iterations,
            eval_tasks: self.eval_tasks,
            contexts_per_point: self.contexts,
        }
        .apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let (command, common) = match &args.command {
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
        Cmd::Lowrank(c) => (Command::Lowrank, c),
        Cmd::Transfer(c) => (Command::Transfer, c),
        Cmd::Theory(c) => (Command::Theory, c),
        Cmd::Gradcheck(c) => (Command::Gradcheck, c),
    };
    let cfg = match common.config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let out = cli::resolve_out_dir(common.out.as_deref(), &cfg);
    match cli::run_experiment(command, &cfg, &out, common.jobs) {
        Ok(report) => {
            for e in &report.errors {
                eprintln!("run failed: {e}");
            }
            println!(
                "{}: {} files in {}, {}/{} checks passed",
                command.name(),
                report.files.len(),
                out.display(),
                report.checks - report.failed_checks,
                report.checks
            );
            if report.success() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
