//! Experiment configuration: JSON schema, presets, overrides and validation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::Estimator;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sampling::{CovariateDist, RngStream};
use crate::tasks::TaskClass;

pub const PRESETS: [&str; 5] = ["fig-L", "fig-sigma-n", "fig-transfer", "fig-lowrank", "fig-scaling"];

pub const TASK_NAMES: [&str; 8] = [
    "affine",
    "relu",
    "cosine",
    "hills",
    "lowrank-affine",
    "lowrank-quad",
    "lowrank-cos",
    "lowrank-lin",
];

pub const COVARIATE_NAMES: [&str; 4] = ["uniform", "anisotropic", "shaped", "latent"];

/// Log-spaced grid of `M = w·I` scales for bandwidth sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

/// A task class with its Lipschitz parameter (`ν` for hills; ignored for low-rank classes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRef {
    pub task: String,
    #[serde(rename = "L", default)]
    pub lipschitz: Option<f64>,
}

impl TaskRef {
    pub fn new(task: &str, lipschitz: f64) -> Self {
        TaskRef {
            task: task.into(),
            lipschitz: Some(lipschitz),
        }
    }

    pub fn label(&self) -> String {
        match self.lipschitz {
            Some(l) if !is_low_rank(&self.task) => format!("{}-L{l}", self.task),
            _ => self.task.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSpec {
    pub pretrain: Vec<TaskRef>,
    pub evaluate: TaskRef,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Tied,
    Direct,
}

/// A fully resolved experiment. List-valued fields span a Cartesian grid of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub d: usize,
    pub n: Vec<usize>,
    /// Queries per context; `None` means `⌊√n⌋`.
    pub m: Option<usize>,
    pub sigma: Vec<f64>,
    #[serde(rename = "L")]
    pub lipschitz: Vec<f64>,
    pub task: Vec<String>,
    pub covariates: Vec<String>,
    pub k: usize,
    pub c_u: f64,
    pub c_v: f64,
    pub estimator: Vec<String>,
    pub mode: Mode,
    pub init_scale: f64,
    pub lr: Vec<f64>,
    pub decay: f64,
    pub iterations: usize,
    pub eval_every: usize,
    pub eval_tasks: usize,
    pub seeds: Vec<u64>,
    pub w_grid: GridSpec,
    pub contexts_per_point: usize,
    pub transfer: Option<TransferSpec>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: None,
            d: 5,
            n: vec![20],
            m: None,
            sigma: vec![0.01],
            lipschitz: vec![1.0],
            task: vec!["relu".into()],
            covariates: vec!["uniform".into()],
            k: 2,
            c_u: std::f64::consts::FRAC_1_SQRT_2,
            c_v: std::f64::consts::FRAC_1_SQRT_2,
            estimator: vec!["softmax".into()],
            mode: Mode::Tied,
            init_scale: 1e-3,
            lr: vec![0.1],
            decay: 0.999,
            iterations: 3000,
            eval_every: 100,
            eval_tasks: 500,
            seeds: vec![0],
            w_grid: GridSpec {
                min: 1.0,
                max: 300.0,
                points: 25,
            },
            contexts_per_point: 2000,
            transfer: None,
            out: None,
        }
    }
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Defaults for a named preset.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig {
        preset: Some(name.into()),
        ..ExperimentConfig::default()
    };
    let cfg = match name {
        "fig-L" => ExperimentConfig {
            lipschitz: vec![0.5, 1.0, 2.0],
            ..base
        },
        "fig-sigma-n" => ExperimentConfig {
            n: vec![10, 20, 80],
            sigma: vec![0.01, 0.5],
            lr: vec![0.01],
            ..base
        },
        "fig-transfer" => ExperimentConfig {
            n: vec![200],
            task: vec!["cosine".into()],
            seeds: (0..5).collect(),
            transfer: Some(TransferSpec {
                pretrain: vec![
                    TaskRef::new("cosine", 1.0),
                    TaskRef::new("affine", 1.0),
                    TaskRef::new("cosine", 10.0),
                    TaskRef::new("cosine", 0.1),
                ],
                evaluate: TaskRef::new("cosine", 1.0),
            }),
            ..base
        },
        "fig-lowrank" => ExperimentConfig {
            d: 10,
            k: 2,
            n: vec![50],
            sigma: vec![0.01],
            task: strings(&["lowrank-affine", "lowrank-quad", "lowrank-cos"]),
            covariates: vec!["shaped".into()],
            estimator: strings(&["softmax", "linear"]),
            lr: vec![1e-3, 1e-2, 1e-1],
            seeds: (0..5).collect(),
            ..base
        },
        "fig-scaling" => ExperimentConfig {
            n: vec![16, 64, 256, 1024],
            sigma: vec![0.05],
            ..base
        },
        other => {
            return Err(Error::validation(
                "preset",
                format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", ")),
            ))
        }
    };
    Ok(cfg)
}

fn parse_error(err: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let message = err.inner().to_string();
    let mut key = err.path().to_string();
    if let Some(rest) = message.strip_prefix("unknown field `") {
        if let Some(name) = rest.split('`').next() {
            key = if key == "." {
                name.to_string()
            } else {
                format!("{key}.{name}")
            };
        }
    }
    Error::Parse { key, message }
}

/// Parses a JSON config. Keys left out take their value from the named preset
/// (or the global defaults); unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value: serde_json::Value = serde_path_to_error::deserialize(&mut de).map_err(parse_error)?;
    let obj = value.as_object().ok_or_else(|| Error::Parse {
        key: ".".into(),
        message: "config must be a JSON object".into(),
    })?;
    let base = match obj.get("preset") {
        Some(serde_json::Value::String(name)) => preset(name)?,
        Some(serde_json::Value::Null) | None => ExperimentConfig::default(),
        Some(_) => {
            return Err(Error::Parse {
                key: "preset".into(),
                message: "expected a string".into(),
            })
        }
    };
    let mut merged = serde_json::to_value(&base).map_err(|e| Error::Parse {
        key: ".".into(),
        message: e.to_string(),
    })?;
    let target = merged.as_object_mut().expect("config serialises to an object");
    for (k, v) in obj {
        if !target.contains_key(k) {
            return Err(Error::Parse {
                key: k.clone(),
                message: format!("unknown field `{k}`"),
            });
        }
        target.insert(k.clone(), v.clone());
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(merged).map_err(parse_error)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn is_low_rank(task: &str) -> bool {
    task.starts_with("lowrank-")
}

fn check(cond: bool, key: &str, message: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::validation(key, message))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.d >= 1, "d", "must be >= 1")?;
        check(
            !self.n.is_empty() && self.n.iter().all(|&n| n >= 1),
            "n",
            "needs values >= 1",
        )?;
        check(self.m.is_none_or(|m| m >= 1), "m", "must be >= 1 or null")?;
        check(
            !self.sigma.is_empty() && self.sigma.iter().all(|s| *s >= 0.0 && s.is_finite()),
            "sigma",
            "needs finite values >= 0",
        )?;
        check(
            !self.lipschitz.is_empty() && self.lipschitz.iter().all(|l| *l >= 0.0 && l.is_finite()),
            "L",
            "needs finite values >= 0",
        )?;
        check(!self.task.is_empty(), "task", "must not be empty")?;
        for t in &self.task {
            check_task(t, self.d)?;
        }
        check(!self.covariates.is_empty(), "covariates", "must not be empty")?;
        for c in &self.covariates {
            check(
                COVARIATE_NAMES.contains(&c.as_str()),
                "covariates",
                format!(
                    "unknown distribution `{c}`; expected one of {}",
                    COVARIATE_NAMES.join(", ")
                ),
            )?;
        }
        let needs_subspace = self.task.iter().any(|t| is_low_rank(t))
            || self.covariates.iter().any(|c| c == "latent")
            || self
                .transfer
                .as_ref()
                .is_some_and(|t| t.pretrain.iter().chain([&t.evaluate]).any(|r| is_low_rank(&r.task)));
        if needs_subspace {
            check(self.k >= 1 && self.k < self.d, "k", "must satisfy 1 <= k < d")?;
        }
        check(
            self.c_u != 0.0 && self.c_u.is_finite(),
            "c_u",
            "must be finite and nonzero",
        )?;
        check(self.c_v.is_finite(), "c_v", "must be finite")?;
        check(!self.estimator.is_empty(), "estimator", "must not be empty")?;
        for e in &self.estimator {
            check(
                e == "softmax" || e == "linear",
                "estimator",
                format!("unknown estimator `{e}`; expected softmax or linear"),
            )?;
        }
        check(
            self.init_scale > 0.0 && self.init_scale.is_finite(),
            "init_scale",
            "must be > 0",
        )?;
        check(
            !self.lr.is_empty() && self.lr.iter().all(|l| *l > 0.0 && l.is_finite()),
            "lr",
            "needs values > 0",
        )?;
        check(self.decay > 0.0 && self.decay <= 1.0, "decay", "must lie in (0, 1]")?;
        check(self.eval_every >= 1, "eval_every", "must be >= 1")?;
        check(self.eval_tasks >= 1, "eval_tasks", "must be >= 1")?;
        check(!self.seeds.is_empty(), "seeds", "must not be empty")?;
        let g = &self.w_grid;
        check(
            g.min > 0.0 && g.max > g.min && g.points >= 2,
            "w_grid",
            "needs 0 < min < max and points >= 2",
        )?;
        check(self.contexts_per_point >= 100, "contexts_per_point", "must be >= 100")?;
        if let Some(t) = &self.transfer {
            check(!t.pretrain.is_empty(), "transfer.pretrain", "must not be empty")?;
            for r in t.pretrain.iter().chain([&t.evaluate]) {
                check_task(&r.task, self.d).map_err(|_| {
                    Error::validation("transfer", format!("invalid task `{}` for d = {}", r.task, self.d))
                })?;
                check(
                    is_low_rank(&r.task) || r.lipschitz.is_some_and(|l| l >= 0.0 && l.is_finite()),
                    "transfer",
                    format!("task `{}` needs a finite L >= 0", r.task),
                )?;
            }
        }
        Ok(())
    }

    /// Queries per context for context length `n`.
    pub fn queries(&self, n: usize) -> usize {
        self.m.unwrap_or_else(|| crate::tasks::default_query_count(n))
    }

    pub fn sha256(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn check_task(task: &str, d: usize) -> Result<()> {
    check(
        TASK_NAMES.contains(&task),
        "task",
        format!("unknown task `{task}`; expected one of {}", TASK_NAMES.join(", ")),
    )?;
    check(task != "hills" || d == 2, "task", "hills tasks need d = 2")
}

pub fn parse_estimator(name: &str) -> Result<Estimator> {
    match name {
        "softmax" => Ok(Estimator::Softmax),
        "linear" => Ok(Estimator::Linear),
        other => Err(Error::validation("estimator", format!("unknown estimator `{other}`"))),
    }
}

/// Task class from its config name. `b` is required for low-rank classes.
pub fn build_class(task: &str, lipschitz: f64, b: Option<&Arc<Matrix>>) -> Result<TaskClass> {
    let need_b = || {
        b.cloned()
            .ok_or_else(|| Error::validation("task", format!("`{task}` needs a subspace")))
    };
    Ok(match task {
        "affine" => TaskClass::Affine { lipschitz },
        "relu" => TaskClass::Relu2 { lipschitz },
        "cosine" => TaskClass::Cosine { lipschitz },
        "hills" => TaskClass::Hills { nu: lipschitz },
        "lowrank-affine" => TaskClass::LowRankAffine { b: need_b()? },
        "lowrank-quad" => TaskClass::LowRankQuad { b: need_b()? },
        "lowrank-cos" => TaskClass::LowRankCos { b: need_b()? },
        "lowrank-lin" => TaskClass::LowRankLin { b: need_b()? },
        other => return Err(Error::validation("task", format!("unknown task `{other}`"))),
    })
}

/// Per-seed random structure shared by every run of that seed: the task
/// subspace `B` and the shaping matrix for `shaped` covariates.
#[derive(Clone, Debug)]
pub struct SeedStructure {
    pub b: Arc<Matrix>,
    pub shaped: CovariateDist,
}

/// Stream id used for per-seed structure draws.
pub const STRUCTURE_STREAM: u64 = 1;

pub fn seed_structure(cfg: &ExperimentConfig, seed: u64) -> Result<SeedStructure> {
    let mut rng = RngStream::new(seed, STRUCTURE_STREAM);
    let k = cfg.k.clamp(1, cfg.d.saturating_sub(1).max(1));
    let (b, _) = crate::sampling::make_random_subspace(cfg.d, k, &mut rng)?;
    let shaped = CovariateDist::random_shaped(cfg.d, &mut rng)?;
    Ok(SeedStructure { b: Arc::new(b), shaped })
}

pub fn build_dist(name: &str, cfg: &ExperimentConfig, structure: &SeedStructure) -> Result<CovariateDist> {
    match name {
        "uniform" => CovariateDist::uniform(cfg.d),
        "anisotropic" => CovariateDist::default_anisotropic(cfg.d),
        "shaped" => Ok(structure.shaped.clone()),
        "latent" => CovariateDist::low_rank((*structure.b).clone(), cfg.c_u, cfg.c_v),
        other => Err(Error::validation(
            "covariates",
            format!("unknown distribution `{other}`"),
        )),
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub lipschitz: Option<Vec<f64>>,
    pub n: Option<Vec<usize>>,
    pub sigma: Option<Vec<f64>>,
    pub task: Option<Vec<String>>,
    pub covariates: Option<Vec<String>>,
    pub estimator: Option<Vec<String>>,
    pub lr: Option<Vec<f64>>,
    pub iterations: Option<usize>,
    pub eval_tasks: Option<usize>,
    pub contexts_per_point: Option<usize>,
}

impl Overrides {
    /// `--seed` replaces the first seed; `--trials K` then keeps `K` seeds
    /// counting up from it.
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seeds[0] = s;
        }
        if let Some(k) = self.trials {
            check(k >= 1, "trials", "must be >= 1")?;
            let first = cfg.seeds[0];
            cfg.seeds = (0..k as u64).map(|i| first + i).collect();
        }
        macro_rules! set {
            ($field:ident, $dst:ident) => {
                if let Some(v) = &self.$field {
                    cfg.$dst = v.clone();
                }
            };
        }
        set!(lipschitz, lipschitz);
        set!(n, n);
        set!(sigma, sigma);
        set!(task, task);
        set!(covariates, covariates);
        set!(estimator, estimator);
        set!(lr, lr);
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.eval_tasks {
            cfg.eval_tasks = v;
        }
        if let Some(v) = self.contexts_per_point {
            cfg.contexts_per_point = v;
        }
        cfg.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_only_config_fills_defaults() {
        let cfg = parse_config(r#"{"preset": "fig-lowrank"}"#).unwrap();
        assert_eq!(
            (cfg.d, cfg.k, cfg.n.clone(), cfg.sigma.clone()),
            (10, 2, vec![50], vec![0.01])
        );
        assert_eq!(cfg.eval_tasks, 500);
        assert_eq!(cfg.covariates, vec!["shaped".to_string()]);
        for p in PRESETS {
            preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn keys_override_preset() {
        let cfg = parse_config(r#"{"preset": "fig-L", "L": [0.5, 2], "iterations": 10}"#).unwrap();
        assert_eq!(cfg.lipschitz, vec![0.5, 2.0]);
        assert_eq!(cfg.iterations, 10);
        assert_eq!(cfg.n, vec![20]);
    }

    #[test]
    fn errors_name_the_key() {
        let err = parse_config(r#"{"sigma": [-1]}"#).unwrap_err();
        assert!(
            matches!(err, Error::Validation { ref key, .. } if key == "sigma"),
            "{err}"
        );
        let err = parse_config(r#"{"sigmaa": [1]}"#).unwrap_err();
        assert!(matches!(err, Error::Parse { ref key, .. } if key == "sigmaa"), "{err}");
        let err = parse_config(r#"{"d": "five"}"#).unwrap_err();
        assert!(matches!(err, Error::Parse { ref key, .. } if key == "d"), "{err}");
        let err = parse_config(r#"{"w_grid": {"min": 1, "max": 2, "points": 3, "x": 1}}"#).unwrap_err();
        assert!(
            matches!(err, Error::Parse { ref key, .. } if key.contains('x')),
            "{err}"
        );
        assert!(parse_config("[1, 2]").is_err());
        assert!(parse_config(r#"{"preset": "fig-nope"}"#).is_err());
        assert!(parse_config(r#"{"task": ["hills"]}"#).is_err());
        assert!(parse_config(r#"{"seeds": []}"#).is_err());
    }

    #[test]
    fn overrides_expand_trials() {
        let mut cfg = ExperimentConfig::default();
        Overrides {
            seed: Some(7),
            trials: Some(3),
            lipschitz: Some(vec![0.5, 2.0]),
            ..Overrides::default()
        }
        .apply(&mut cfg)
        .unwrap();
        assert_eq!(cfg.seeds, vec![7, 8, 9]);
        assert_eq!(cfg.lipschitz, vec![0.5, 2.0]);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.sha256(), b.sha256());
        b.iterations += 1;
        assert_ne!(a.sha256(), b.sha256());
        assert_eq!(a.sha256().len(), 64);
    }
}
