//! Experiment runner behind the `icl-lab` binary.
//!
//! Every subcommand expands an [`ExperimentConfig`] into a grid of runs,
//! executes them (in parallel unless `--jobs 1`), and writes CSV files plus a
//! `manifest.json` under the output directory. Each run derives its random
//! streams from its seed alone, so CSV bodies do not depend on the job count.

pub mod config;
pub mod csv;
mod run;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};

pub use config::{load_config, parse_config, preset, ExperimentConfig, Overrides, TaskRef, TransferSpec};
pub use run::{gradcheck_instance, single_run, GradcheckRow};

/// Env var consulted when neither `--out` nor the config names an output directory.
pub const OUT_ENV: &str = "ICL_LAB_OUT";
pub const DEFAULT_OUT: &str = "icl-lab-out";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Sweep,
    Lowrank,
    Transfer,
    Theory,
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Sweep => "sweep",
            Command::Lowrank => "lowrank",
            Command::Transfer => "transfer",
            Command::Theory => "theory",
            Command::Gradcheck => "gradcheck",
        }
    }

    pub const ALL: [Command; 6] = [
        Command::Train,
        Command::Sweep,
        Command::Lowrank,
        Command::Transfer,
        Command::Theory,
        Command::Gradcheck,
    ];

    pub fn from_name(name: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// What a run produced.
#[derive(Clone, Debug, Default)]
pub struct RunReport {
    /// Files written, relative to the output directory, in write order.
    pub files: Vec<PathBuf>,
    pub checks: usize,
    pub failed_checks: usize,
    /// Runs that aborted (for example on a non-finite loss); their partial
    /// outputs are still written.
    pub errors: Vec<String>,
}

impl RunReport {
    pub fn success(&self) -> bool {
        self.failed_checks == 0 && self.errors.is_empty()
    }

    fn record_check(&mut self, pass: bool) {
        self.checks += 1;
        if !pass {
            self.failed_checks += 1;
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    config_sha256: String,
    config: &'a ExperimentConfig,
    seeds: &'a [u64],
    build: String,
    partial: bool,
    checks: usize,
    failed_checks: usize,
    errors: &'a [String],
    files: Vec<String>,
    started_unix: u64,
    finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn build_id() -> String {
    format!("icl-lab {}", env!("CARGO_PKG_VERSION"))
}

/// `--out`, then the config's `out`, then `$ICL_LAB_OUT`, then `./icl-lab-out`.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Runs `command` and writes its outputs and `manifest.json` into `out`.
///
/// `jobs` caps the worker threads; `None` uses rayon's default pool.
pub fn run_experiment(command: Command, cfg: &ExperimentConfig, out: &Path, jobs: Option<usize>) -> Result<RunReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let started_unix = unix_now();
    let dispatch = || match command {
        Command::Train => run::train(cfg, out, false),
        Command::Lowrank => run::train(cfg, out, true),
        Command::Sweep => run::sweep(cfg, out),
        Command::Transfer => run::transfer(cfg, out),
        Command::Theory => run::theory(cfg, out),
        Command::Gradcheck => run::gradcheck(cfg, out),
    };
    let result = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::degenerate(format!("thread pool: {e}")))?
            .install(dispatch),
        None => dispatch(),
    };
    let (report, partial) = match &result {
        Ok(r) => (r.clone(), !r.errors.is_empty()),
        Err(e) => (
            RunReport {
                errors: vec![e.to_string()],
                ..RunReport::default()
            },
            true,
        ),
    };
    let manifest = Manifest {
        command: command.name(),
        config_sha256: cfg.sha256(),
        config: cfg,
        seeds: &cfg.seeds,
        build: build_id(),
        partial,
        checks: report.checks,
        failed_checks: report.failed_checks,
        errors: &report.errors,
        files: report.files.iter().map(|p| p.display().to_string()).collect(),
        started_unix,
        finished_unix: unix_now(),
    };
    let path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    result
}
