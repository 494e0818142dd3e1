use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::RngCore;
use rayon::prelude::*;

use super::config::{
    build_class, build_dist, is_low_rank, parse_estimator, seed_structure, ExperimentConfig, Mode, SeedStructure,
    TaskRef,
};
use super::csv::{int, num, opt, text, Table};
use super::RunReport;
use crate::attention::{
    context_sq_loss, finite_diff_grad, gradient_relative_error, loss_and_grad, AttentionParams, ContextSampler,
    Estimator,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sampling::{CovariateDist, RngStream};
use crate::tasks::{sample_context, TaskClass};
use crate::theory::{self, BoundSuiteConfig};
use crate::training::{evaluate_icl, pretrain, AdamConfig, TrainConfig, TrainTrace};

const TRAIN_STREAM: u64 = 0;
const SWEEP_STREAM: u64 = 2;
const TRANSFER_EVAL_STREAM: u64 = 3;
const THEORY_STREAM: u64 = 4;
const GRADCHECK_STREAM: u64 = 5;

/// Final `ρ` below which a run counts as having recovered the subspace.
pub const RHO_RECOVERED: f64 = 0.2;
/// Final `ρ` above which a run counts as not having recovered it.
pub const RHO_UNRECOVERED: f64 = 1.0;
/// Share of seeds that must recover for a softmax low-rank check to pass.
pub const RECOVERY_FRACTION: f64 = 0.8;

pub const GRADCHECK_INSTANCES: u64 = 100;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
struct TrainRun {
    task: TaskRef,
    covariates: String,
    estimator: String,
    n: usize,
    sigma: f64,
    lr: f64,
    seed: u64,
}

impl TrainRun {
    fn label(&self) -> String {
        format!(
            "{}_{}_{}_n{}_sigma{}_lr{}",
            self.task.label(),
            self.covariates,
            self.estimator,
            self.n,
            self.sigma,
            self.lr
        )
    }
}

fn lipschitz_values(cfg: &ExperimentConfig, task: &str) -> Vec<Option<f64>> {
    if is_low_rank(task) {
        vec![None]
    } else {
        cfg.lipschitz.iter().copied().map(Some).collect()
    }
}

fn train_grid(cfg: &ExperimentConfig) -> Vec<TrainRun> {
    let mut runs = Vec::new();
    for task in &cfg.task {
        for lipschitz in lipschitz_values(cfg, task) {
            for covariates in &cfg.covariates {
                for estimator in &cfg.estimator {
                    for &n in &cfg.n {
                        for &sigma in &cfg.sigma {
                            for &lr in &cfg.lr {
                                for &seed in &cfg.seeds {
                                    runs.push(TrainRun {
                                        task: TaskRef {
                                            task: task.clone(),
                                            lipschitz,
                                        },
                                        covariates: covariates.clone(),
                                        estimator: estimator.clone(),
                                        n,
                                        sigma,
                                        lr,
                                        seed,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    runs
}

fn structures(cfg: &ExperimentConfig) -> Result<BTreeMap<u64, SeedStructure>> {
    cfg.seeds.iter().map(|&s| Ok((s, seed_structure(cfg, s)?))).collect()
}

fn class_for(task: &TaskRef, structure: &SeedStructure) -> Result<TaskClass> {
    build_class(&task.task, task.lipschitz.unwrap_or(0.0), Some(&structure.b))
}

fn sampler_for(
    cfg: &ExperimentConfig,
    task: &TaskRef,
    covariates: &str,
    n: usize,
    sigma: f64,
    structure: &SeedStructure,
) -> Result<ContextSampler> {
    Ok(ContextSampler {
        class: class_for(task, structure)?,
        dist: build_dist(covariates, cfg, structure)?,
        n,
        m: cfg.queries(n),
        sigma,
    })
}

struct TrainResult {
    run: TrainRun,
    trace: TrainTrace,
    params: Option<AttentionParams>,
    error: Option<String>,
}

fn build_train_config(
    cfg: &ExperimentConfig,
    run: &TrainRun,
    structure: &SeedStructure,
    track_rho: bool,
    eval_sampler: Option<ContextSampler>,
) -> Result<TrainConfig> {
    let sampler = sampler_for(cfg, &run.task, &run.covariates, run.n, run.sigma, structure)?;
    let subspace = (track_rho || is_low_rank(&run.task.task)).then(|| (*structure.b).clone());
    Ok(TrainConfig {
        sampler,
        eval_sampler,
        estimator: parse_estimator(&run.estimator)?,
        tied: cfg.mode == Mode::Tied,
        init_scale: cfg.init_scale,
        adam: AdamConfig {
            lr: run.lr,
            decay: cfg.decay,
            ..AdamConfig::default()
        },
        iterations: cfg.iterations,
        eval_every: cfg.eval_every,
        eval_tasks: cfg.eval_tasks,
        subspace,
    })
}

/// Training setup for the first grid point of `cfg` under `seed`, with the
/// stream `train` would use for it.
pub fn single_run(cfg: &ExperimentConfig, seed: u64) -> Result<(TrainConfig, RngStream)> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.seeds = vec![seed];
    let run = &train_grid(&cfg)[0];
    let structure = seed_structure(&cfg, seed)?;
    Ok((
        build_train_config(&cfg, run, &structure, false, None)?,
        RngStream::new(seed, TRAIN_STREAM),
    ))
}

fn execute_train(
    cfg: &ExperimentConfig,
    run: &TrainRun,
    structure: &SeedStructure,
    track_rho: bool,
    eval_sampler: Option<ContextSampler>,
) -> Result<TrainResult> {
    let train = build_train_config(cfg, run, structure, track_rho, eval_sampler)?;
    let rng = RngStream::new(run.seed, TRAIN_STREAM);
    Ok(match pretrain(&train, &rng) {
        Ok(outcome) => TrainResult {
            run: run.clone(),
            trace: outcome.trace,
            params: Some(outcome.params),
            error: None,
        },
        Err(abort) => TrainResult {
            run: run.clone(),
            trace: abort.trace,
            params: None,
            error: Some(format!("{}: {}", run.label(), abort.source)),
        },
    })
}

fn trace_table(trace: &TrainTrace) -> Table {
    let mut t = Table::new(&["iteration", "norm_M", "test_error", "rho", "train_loss"]);
    for cp in &trace.checkpoints {
        t.push(vec![
            int(cp.iteration),
            num(cp.norm_m),
            num(cp.test_error),
            opt(cp.rho),
            opt(cp.train_loss),
        ]);
    }
    t
}

fn write(table: &Table, out: &Path, rel: PathBuf, report: &mut RunReport) -> Result<()> {
    table.write(&out.join(&rel))?;
    report.files.push(rel);
    Ok(())
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for one value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, var.sqrt())
}

fn final_values(results: &[&TrainResult]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut norms = Vec::new();
    let mut errors = Vec::new();
    let mut rhos = Vec::new();
    for r in results {
        if let Some(cp) = r.trace.last() {
            norms.push(cp.norm_m);
            errors.push(cp.test_error);
            if let Some(rho) = cp.rho {
                rhos.push(rho);
            }
        }
    }
    (norms, errors, rhos)
}

/// `train` and `lowrank`: one trace per run, then per-run and per-group summaries.
/// `lowrank` also tracks `ρ` everywhere, selects each group's learning rate by
/// mean final test error, and checks subspace recovery at that rate.
pub(super) fn train(cfg: &ExperimentConfig, out: &Path, lowrank: bool) -> Result<RunReport> {
    let command = if lowrank { "lowrank" } else { "train" };
    let structures = structures(cfg)?;
    let runs = train_grid(cfg);
    let results: Vec<TrainResult> = runs
        .par_iter()
        .map(|run| execute_train(cfg, run, &structures[&run.seed], lowrank, None))
        .collect::<Result<_>>()?;

    let mut report = RunReport::default();
    let mut summary = Table::new(&[
        "label",
        "task",
        "L",
        "covariates",
        "estimator",
        "n",
        "sigma",
        "lr",
        "seed",
        "last_iteration",
        "norm_M",
        "test_error",
        "rho",
        "clipped_logits",
        "status",
    ]);
    let mut groups: BTreeMap<String, Vec<&TrainResult>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in &results {
        let label = r.run.label();
        let rel = PathBuf::from(command)
            .join(&label)
            .join(format!("seed-{}", r.run.seed))
            .join("trace.csv");
        write(&trace_table(&r.trace), out, rel, &mut report)?;
        let last = r.trace.last();
        summary.push(vec![
            text(&label),
            text(&r.run.task.task),
            opt(r.run.task.lipschitz),
            text(&r.run.covariates),
            text(&r.run.estimator),
            int(r.run.n),
            num(r.run.sigma),
            num(r.run.lr),
            int(r.run.seed),
            last.map(|c| int(c.iteration)).unwrap_or_default(),
            opt(last.map(|c| c.norm_m)),
            opt(last.map(|c| c.test_error)),
            opt(last.and_then(|c| c.rho)),
            int(r.trace.clipped_logits),
            text(if r.error.is_some() { "aborted" } else { "ok" }),
        ]);
        if let Some(e) = &r.error {
            report.errors.push(e.clone());
        }
        if !groups.contains_key(&label) {
            order.push(label.clone());
        }
        groups.entry(label).or_default().push(r);
    }
    write(&summary, out, PathBuf::from(command).join("summary.csv"), &mut report)?;

    let mut aggregate = Table::new(&[
        "label",
        "task",
        "L",
        "covariates",
        "estimator",
        "n",
        "sigma",
        "lr",
        "seeds",
        "norm_M_mean",
        "norm_M_std",
        "test_error_mean",
        "test_error_std",
        "rho_mean",
        "rho_std",
    ]);
    for label in &order {
        let members = &groups[label];
        let run = &members[0].run;
        let (norms, errors, rhos) = final_values(members);
        let (nm, ns) = mean_std(&norms);
        let (em, es) = mean_std(&errors);
        let rho = (!rhos.is_empty()).then(|| mean_std(&rhos));
        aggregate.push(vec![
            text(label),
            text(&run.task.task),
            opt(run.task.lipschitz),
            text(&run.covariates),
            text(&run.estimator),
            int(run.n),
            num(run.sigma),
            num(run.lr),
            int(members.len()),
            num(nm),
            num(ns),
            num(em),
            num(es),
            opt(rho.map(|r| r.0)),
            opt(rho.map(|r| r.1)),
        ]);
    }
    write(
        &aggregate,
        out,
        PathBuf::from(command).join("aggregate.csv"),
        &mut report,
    )?;

    if lowrank {
        lowrank_selection(cfg, &results, out, &mut report)?;
    }
    Ok(report)
}

fn lowrank_selection(
    cfg: &ExperimentConfig,
    results: &[TrainResult],
    out: &Path,
    report: &mut RunReport,
) -> Result<()> {
    // group key without lr, keeping config order
    let key = |r: &TrainRun| {
        format!(
            "{}_{}_{}_n{}_sigma{}",
            r.task.label(),
            r.covariates,
            r.estimator,
            r.n,
            r.sigma
        )
    };
    let mut order: Vec<String> = Vec::new();
    let mut by_group: BTreeMap<String, Vec<&TrainResult>> = BTreeMap::new();
    for r in results {
        let k = key(&r.run);
        if !by_group.contains_key(&k) {
            order.push(k.clone());
        }
        by_group.entry(k).or_default().push(r);
    }
    let mut selected = Table::new(&[
        "task",
        "covariates",
        "estimator",
        "n",
        "sigma",
        "selected_lr",
        "seed",
        "rho",
        "test_error",
    ]);
    let mut checks = Table::new(&[
        "task",
        "covariates",
        "estimator",
        "selected_lr",
        "requirement",
        "passing_seeds",
        "seeds",
        "pass",
    ]);
    for k in &order {
        let members = &by_group[k];
        let mut best: Option<(f64, f64)> = None;
        for &lr in &cfg.lr {
            let at: Vec<&TrainResult> = members.iter().copied().filter(|r| r.run.lr == lr).collect();
            let (_, errors, _) = final_values(&at);
            if errors.len() != at.len() || errors.is_empty() {
                continue;
            }
            let mean = mean_std(&errors).0;
            if best.is_none_or(|(_, e)| mean < e) {
                best = Some((lr, mean));
            }
        }
        let Some((lr, _)) = best else {
            report
                .errors
                .push(format!("{k}: no learning rate finished on every seed"));
            continue;
        };
        let chosen: Vec<&TrainResult> = members.iter().copied().filter(|r| r.run.lr == lr).collect();
        let run = &chosen[0].run;
        let softmax = parse_estimator(&run.estimator)? == Estimator::Softmax;
        let mut passing = 0;
        for r in &chosen {
            let cp = r.trace.last().expect("finished runs have checkpoints");
            let rho = cp.rho.unwrap_or(f64::INFINITY);
            selected.push(vec![
                text(&r.run.task.task),
                text(&r.run.covariates),
                text(&r.run.estimator),
                int(r.run.n),
                num(r.run.sigma),
                num(lr),
                int(r.run.seed),
                num(rho),
                num(cp.test_error),
            ]);
            let ok = if softmax {
                rho < RHO_RECOVERED
            } else {
                rho > RHO_UNRECOVERED
            };
            passing += usize::from(ok);
        }
        let seeds = chosen.len();
        let (requirement, pass) = if softmax {
            let need = (RECOVERY_FRACTION * seeds as f64).ceil() as usize;
            (format!("rho<{RHO_RECOVERED} in >={need} seeds"), passing >= need)
        } else {
            (format!("rho>{RHO_UNRECOVERED} in all seeds"), passing == seeds)
        };
        report.record_check(pass);
        checks.push(vec![
            text(&run.task.task),
            text(&run.covariates),
            text(&run.estimator),
            num(lr),
            text(&requirement),
            int(passing),
            int(seeds),
            int(pass),
        ]);
    }
    write(&selected, out, PathBuf::from("lowrank").join("lowrank.csv"), report)?;
    write(&checks, out, PathBuf::from("lowrank").join("checks.csv"), report)
}

#[derive(Clone, Debug)]
struct SweepRun {
    task: TaskRef,
    covariates: String,
    n: usize,
    sigma: f64,
    seed: u64,
}

impl SweepRun {
    fn label(&self) -> String {
        format!(
            "{}_{}_n{}_sigma{}",
            self.task.label(),
            self.covariates,
            self.n,
            self.sigma
        )
    }

    fn group(&self) -> String {
        format!(
            "{}_{}_sigma{}_seed{}",
            self.task.label(),
            self.covariates,
            self.sigma,
            self.seed
        )
    }
}

/// `sweep`: loss of `M = w·I` over the configured log grid, one pooled set of
/// contexts per run, followed by a log-log exponent fit over `n`.
pub(super) fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let structures = structures(cfg)?;
    let grid = theory::log_grid(cfg.w_grid.min, cfg.w_grid.max, cfg.w_grid.points)?;
    let mut runs = Vec::new();
    for task in &cfg.task {
        for lipschitz in lipschitz_values(cfg, task) {
            for covariates in &cfg.covariates {
                for &sigma in &cfg.sigma {
                    for &seed in &cfg.seeds {
                        for &n in &cfg.n {
                            runs.push(SweepRun {
                                task: TaskRef {
                                    task: task.clone(),
                                    lipschitz,
                                },
                                covariates: covariates.clone(),
                                n,
                                sigma,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    let results: Vec<theory::SweepResult> = runs
        .par_iter()
        .map(|run| {
            let sampler = sampler_for(
                cfg,
                &run.task,
                &run.covariates,
                run.n,
                run.sigma,
                &structures[&run.seed],
            )?;
            theory::bandwidth_sweep(
                &sampler,
                &grid,
                cfg.contexts_per_point,
                &RngStream::new(run.seed, SWEEP_STREAM),
            )
        })
        .collect::<Result<_>>()?;

    let mut report = RunReport::default();
    let mut scaling = Table::new(&[
        "label",
        "task",
        "L",
        "covariates",
        "n",
        "sigma",
        "seed",
        "lambda",
        "w_star",
        "argmin_w",
        "boundary",
        "in_validity_window",
    ]);
    let mut groups: BTreeMap<String, Vec<(&SweepRun, &theory::SweepResult)>> = BTreeMap::new();
    let mut order = Vec::new();
    for (run, res) in runs.iter().zip(&results) {
        let mut t = Table::new(&["w", "loss_mean", "loss_stderr", "bias", "noise"]);
        for k in 0..res.grid.len() {
            t.push(vec![
                num(res.grid[k]),
                num(res.loss_mean[k]),
                num(res.loss_stderr[k]),
                num(res.bias[k]),
                num(res.noise[k]),
            ]);
        }
        let rel = PathBuf::from("sweep")
            .join(run.label())
            .join(format!("seed-{}", run.seed))
            .join("sweep.csv");
        write(&t, out, rel, &mut report)?;
        let window = run
            .task
            .lipschitz
            .filter(|_| !is_low_rank(&run.task.task))
            .map(|l| theory::in_validity_window(cfg.d, run.n, l, run.sigma));
        scaling.push(vec![
            text(&run.label()),
            text(&run.task.task),
            opt(run.task.lipschitz),
            text(&run.covariates),
            int(run.n),
            num(run.sigma),
            int(run.seed),
            opt(res.lambda),
            num(res.w_star),
            num(res.grid[res.argmin]),
            int(res.boundary),
            window.map(int).unwrap_or_default(),
        ]);
        let g = run.group();
        if !groups.contains_key(&g) {
            order.push(g.clone());
        }
        groups.entry(g).or_default().push((run, res));
    }
    write(&scaling, out, PathBuf::from("sweep").join("scaling.csv"), &mut report)?;

    let (_, beta) = theory::scaling_exponents(cfg.d);
    let (alpha, _) = theory::scaling_exponents(cfg.d);
    let mut exponents = Table::new(&[
        "task",
        "L",
        "covariates",
        "sigma",
        "seed",
        "points",
        "slope",
        "alpha",
        "beta",
        "w_star_increasing",
        "any_boundary",
    ]);
    for g in &order {
        let members = &groups[g];
        let (lambdas, stars): (Vec<f64>, Vec<f64>) = members
            .iter()
            .filter_map(|(_, r)| r.lambda.filter(|l| l.is_finite()).map(|l| (l, r.w_star)))
            .unzip();
        if lambdas.len() < 3 {
            continue;
        }
        let Ok(slope) = theory::exponent_fit(&lambdas, &stars) else {
            continue;
        };
        let mut pairs: Vec<(f64, f64)> = lambdas.iter().copied().zip(stars.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let increasing = pairs.windows(2).all(|w| w[1].1 > w[0].1);
        let run = members[0].0;
        exponents.push(vec![
            text(&run.task.task),
            opt(run.task.lipschitz),
            text(&run.covariates),
            num(run.sigma),
            int(run.seed),
            int(lambdas.len()),
            num(slope),
            num(alpha),
            num(beta),
            int(increasing),
            int(members.iter().any(|(_, r)| r.boundary)),
        ]);
    }
    write(
        &exponents,
        out,
        PathBuf::from("sweep").join("exponents.csv"),
        &mut report,
    )?;
    Ok(report)
}

/// `transfer`: pretrain on each listed class, then score every model on the
/// evaluation class with a fixed set of tasks per seed.
pub(super) fn transfer(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let plan = cfg
        .transfer
        .as_ref()
        .ok_or_else(|| Error::validation("transfer", "the transfer command needs a `transfer` block"))?;
    let structures = structures(cfg)?;
    let mut runs = Vec::new();
    for task in &plan.pretrain {
        for &seed in &cfg.seeds {
            runs.push(TrainRun {
                task: task.clone(),
                covariates: cfg.covariates[0].clone(),
                estimator: cfg.estimator[0].clone(),
                n: cfg.n[0],
                sigma: cfg.sigma[0],
                lr: cfg.lr[0],
                seed,
            });
        }
    }
    let eval_label = plan.evaluate.label();
    let results: Vec<(TrainResult, Option<f64>)> = runs
        .par_iter()
        .map(|run| {
            let structure = &structures[&run.seed];
            let eval = sampler_for(cfg, &plan.evaluate, &run.covariates, run.n, run.sigma, structure)?;
            let result = execute_train(cfg, run, structure, false, Some(eval.clone()))?;
            let error = match &result.params {
                Some(p) => Some(evaluate_icl(
                    p,
                    &eval,
                    cfg.eval_tasks,
                    &RngStream::new(run.seed, TRANSFER_EVAL_STREAM),
                )?),
                None => None,
            };
            Ok((result, error))
        })
        .collect::<Result<_>>()?;

    let mut report = RunReport::default();
    let mut per_seed = Table::new(&["pretrain_class", "eval_class", "seed", "error"]);
    let mut by_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (r, err) in &results {
        let label = r.run.task.label();
        let rel = PathBuf::from("transfer")
            .join(&label)
            .join(format!("seed-{}", r.run.seed))
            .join("trace.csv");
        write(&trace_table(&r.trace), out, rel, &mut report)?;
        if let Some(e) = &r.error {
            report.errors.push(e.clone());
        }
        per_seed.push(vec![text(&label), text(&eval_label), int(r.run.seed), opt(*err)]);
        if let Some(e) = err {
            by_class.entry(label).or_default().push(*e);
        }
    }
    write(
        &per_seed,
        out,
        PathBuf::from("transfer").join("transfer_runs.csv"),
        &mut report,
    )?;

    let matched = by_class.get(&eval_label).map(|v| mean_std(v).0);
    let mut table = Table::new(&[
        "pretrain_class",
        "eval_class",
        "error_mean",
        "error_std",
        "seeds",
        "ratio_to_matched",
    ]);
    for task in &plan.pretrain {
        let label = task.label();
        let Some(errors) = by_class.get(&label) else {
            continue;
        };
        let (mean, std) = mean_std(errors);
        table.push(vec![
            text(&label),
            text(&eval_label),
            num(mean),
            num(std),
            int(errors.len()),
            opt(matched.map(|m| mean / m)),
        ]);
    }
    write(&table, out, PathBuf::from("transfer").join("transfer.csv"), &mut report)?;
    Ok(report)
}

/// `theory`: the full bound suite; every row is a check.
pub(super) fn theory(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let checks = theory::bound_suite(
        &BoundSuiteConfig::default(),
        &RngStream::new(cfg.seeds[0], THEORY_STREAM),
    )?;
    let mut report = RunReport::default();
    let mut table = Table::new(&["quantity", "measured", "lower", "upper", "slack", "pass"]);
    for c in &checks {
        report.record_check(c.pass);
        table.push(vec![
            text(&c.quantity),
            num(c.measured),
            num(c.lower),
            num(c.upper),
            num(c.slack),
            int(c.pass),
        ]);
    }
    write(&table, out, PathBuf::from("bounds.csv"), &mut report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub instance: u64,
    pub tied: bool,
    pub estimator: Estimator,
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub rel_err: f64,
    pub pass: bool,
}

/// Random gradient check number `index`: `d ≤ 5`, `n ≤ 8`, alternating direct
/// and tied parameters, every fourth instance with linear attention.
pub fn gradcheck_instance(index: u64, rng: &RngStream) -> Result<GradcheckRow> {
    let mut r = rng.substream(index);
    let d = 1 + (r.next_u64() % 5) as usize;
    let n = 1 + (r.next_u64() % 8) as usize;
    let m = 1 + (r.next_u64() % 3) as usize;
    let tied = index % 2 == 1;
    let estimator = if index % 4 == 3 {
        Estimator::Linear
    } else {
        Estimator::Softmax
    };
    let batch = sample_context(
        &TaskClass::Relu2 { lipschitz: 1.0 },
        &CovariateDist::uniform(d)?,
        n,
        m,
        0.1,
        &mut r,
    )?;
    let raw = Matrix::from_fn(d, d, |_, _| r.gaussian());
    let params = if tied {
        AttentionParams::tied(raw, estimator)
    } else {
        AttentionParams::direct(raw, estimator)
    };
    let analytic = loss_and_grad(&params, &batch)?.grad;
    let numeric = finite_diff_grad(
        |p| context_sq_loss(&params.with_raw(p.clone()), &batch).unwrap_or(f64::NAN),
        params.raw(),
        GRADCHECK_STEP,
    );
    let rel_err = gradient_relative_error(&analytic, &numeric);
    Ok(GradcheckRow {
        instance: index,
        tied,
        estimator,
        d,
        n,
        m,
        rel_err,
        pass: rel_err < GRADCHECK_TOL,
    })
}

/// `gradcheck`: analytic gradients against central differences on random instances.
pub(super) fn gradcheck(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let rng = RngStream::new(cfg.seeds[0], GRADCHECK_STREAM);
    let rows: Vec<GradcheckRow> = (0..GRADCHECK_INSTANCES)
        .into_par_iter()
        .map(|i| gradcheck_instance(i, &rng))
        .collect::<Result<_>>()?;
    let mut report = RunReport::default();
    let mut table = Table::new(&["instance", "mode", "estimator", "d", "n", "m", "rel_err", "pass"]);
    for r in &rows {
        report.record_check(r.pass);
        table.push(vec![
            int(r.instance),
            text(if r.tied { "tied" } else { "direct" }),
            text(r.estimator.name()),
            int(r.d),
            int(r.n),
            int(r.m),
            num(r.rel_err),
            int(r.pass),
        ]);
    }
    write(&table, out, PathBuf::from("gradcheck.csv"), &mut report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_by_hand() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grid_expands_cartesian_product() {
        let cfg = ExperimentConfig {
            task: vec!["relu".into(), "lowrank-quad".into()],
            lipschitz: vec![0.5, 2.0],
            seeds: vec![0, 1],
            d: 4,
            ..ExperimentConfig::default()
        };
        // relu: 2 L values x 2 seeds; low-rank ignores L: 2 seeds
        assert_eq!(train_grid(&cfg).len(), 6);
    }

    #[test]
    fn gradcheck_instances_pass() {
        let rng = RngStream::new(0, GRADCHECK_STREAM);
        for i in 0..20 {
            let row = gradcheck_instance(i, &rng).unwrap();
            assert!(row.pass, "{row:?}");
        }
    }
}
