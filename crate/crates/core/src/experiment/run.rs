//! Cell orchestration: attack an image group, optionally defend it, extract
//! a condition, generate, and score against the clean class.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use log::{error, info, warn};

use super::config::{Budget, ExperimentConfig};
use super::models::{prepare_models, Models, TrainPolicy};
use super::report::{
    artifact, emit_plot_data, write_atomic, write_csv, CellFailure, CellTiming, MetricRow, PlotFilter, RunManifest,
    METRIC_COLUMNS, TIMING_COLUMNS,
};
use super::scenarios::{CellEnv, GroupStreams, ScenarioRegistry};
use crate::attacks::{verify_budget, AttackContext, AttackMode, AttackRegistry, AttackTrace};
use crate::data::{load_dataset, Dataset};
use crate::defenses::{DefenseContext, DefenseRegistry};
use crate::error::{Error, Result};
use crate::metrics::{embed, report, FeatureBatch, FeatureSource, MetricReport};
use crate::tensor::{RngStream, Tensor};

/// Attack outputs are shared by every defense of the same job.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackJob {
    pub attack: String,
    pub seed: u64,
    pub epsilon: Budget,
    pub n_steps: usize,
}

/// `attack × seed × ε × N`. The unattacked baseline does not depend on ε or
/// N, so it appears once per seed with both recorded as zero.
pub fn plan_jobs(cfg: &ExperimentConfig) -> Vec<AttackJob> {
    let mut jobs = Vec::new();
    for attack in &cfg.attack.methods {
        for &seed in &cfg.seeds {
            if attack == "none" {
                jobs.push(AttackJob { attack: attack.clone(), seed, epsilon: Budget(0.0), n_steps: 0 });
                continue;
            }
            for eps in cfg.epsilons() {
                for n in cfg.n_steps_axis() {
                    jobs.push(AttackJob { attack: attack.clone(), seed, epsilon: eps, n_steps: n });
                }
            }
        }
    }
    jobs
}

pub fn target_class(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> usize {
    cfg.scenario.target_class.unwrap_or((seed % data.classes as u64) as usize)
}

/// Disjoint groups of `size` images of `class`, in a seed-dependent order.
pub fn select_groups(data: &Dataset, class: usize, groups: usize, size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let pool = data.indices_of(class);
    if pool.len() < groups * size {
        return Err(Error::Config(format!(
            "class {class} has {} images, {groups} groups of {size} need {}",
            pool.len(),
            groups * size
        )));
    }
    let perm = RngStream::new(seed).derive(1).permutation(pool.len());
    Ok((0..groups).map(|g| perm[g * size..(g + 1) * size].iter().map(|&i| pool[i]).collect()).collect())
}

#[derive(Clone, Debug)]
pub struct AttackedGroups {
    pub class: usize,
    pub clean: Vec<Tensor>,
    pub adversarial: Vec<Tensor>,
    pub budget_pass: bool,
    pub max_deviation: f32,
    pub secs: f64,
}

pub fn attack_context<'a>(models: &'a Models, data: &Dataset) -> AttackContext<'a> {
    AttackContext {
        denoiser: Some(&models.denoiser),
        schedule: &models.schedule,
        codec: models.codec.as_ref(),
        classifier: models.classifier.as_ref(),
        condition: models.denoiser.null_condition(),
        range: data.range,
    }
}

pub fn defense_context<'a>(models: &'a Models, data: &Dataset) -> DefenseContext<'a> {
    DefenseContext {
        image_size: data.image_size,
        range: data.range,
        denoiser: Some(&models.denoiser),
        schedule: Some(&models.schedule),
        codec: if models.latent { models.codec.as_ref() } else { None },
    }
}

/// Runs the job's attack on every group and checks each output's budget.
pub fn attack_groups(env: &CellEnv<'_>, job: &AttackJob) -> Result<AttackedGroups> {
    attack_groups_traced(env, job, None)
}

/// [`attack_groups`] that also collects one iteration trace per group.
pub fn attack_groups_traced(
    env: &CellEnv<'_>,
    job: &AttackJob,
    mut traces: Option<&mut Vec<AttackTrace>>,
) -> Result<AttackedGroups> {
    let cfg = env.cfg;
    let class = target_class(cfg, env.data, job.seed);
    let groups = select_groups(env.data, class, cfg.scenario.groups, cfg.inversion.group_size, job.seed)?;
    let attack = AttackRegistry::default();
    let attack = attack.get(&job.attack)?;
    let acfg = cfg.attack.config(job.epsilon, job.n_steps.max(1));
    if acfg.mode == AttackMode::Latent && !env.models.latent && attack.diffusion_aware() {
        return Err(Error::Config("latent attack mode needs a latent denoiser".into()));
    }
    let ctx = attack_context(env.models, env.data);
    let mut out = AttackedGroups { class, clean: vec![], adversarial: vec![], budget_pass: true, max_deviation: 0.0, secs: 0.0 };
    for (g, idx) in groups.iter().enumerate() {
        let x0 = env.data.data.select_rows(idx);
        let mut rng = GroupStreams::new(job.seed, g).attack;
        let start = Instant::now();
        let mut trace = AttackTrace::default();
        let x_adv =
            attack.perturb(&ctx, &x0, &vec![class; idx.len()], &acfg, &mut rng, traces.is_some().then_some(&mut trace))?;
        out.secs += start.elapsed().as_secs_f64();
        if let Some(t) = traces.as_deref_mut() {
            t.push(trace);
        }
        let b = verify_budget(&x0, &x_adv, acfg.epsilon, env.data.range)?;
        if !b.pass {
            error!("{} seed {} group {g}: budget check failed (max deviation {})", job.attack, job.seed, b.max_deviation);
        }
        out.budget_pass &= b.pass;
        out.max_deviation = out.max_deviation.max(b.max_deviation);
        out.clean.push(x0);
        out.adversarial.push(x_adv);
    }
    Ok(out)
}

pub fn reference_features(env: &CellEnv<'_>, class: usize) -> Result<FeatureBatch> {
    embed(env.models.codec.as_ref(), &env.data.class_data(class), env.cfg.metrics.features, FeatureSource::Real)
}

pub struct Evaluation {
    pub report: MetricReport,
    pub generated: Tensor,
    pub defense_secs: f64,
    pub generate_secs: f64,
    pub metric_secs: f64,
}

/// Defends each group, runs the scenario on it and scores the pooled
/// generations against `real`.
pub fn defend_then_evaluate(
    env: &CellEnv<'_>,
    groups: &[Tensor],
    class: usize,
    defense: &str,
    seed: u64,
    real: &FeatureBatch,
) -> Result<Evaluation> {
    let defenses = DefenseRegistry::default();
    let defense = defenses.get(defense)?;
    let scenarios = ScenarioRegistry::default();
    let scenario = scenarios.get(&env.cfg.scenario.name)?;
    let dctx = defense_context(env.models, env.data);
    let (mut defense_secs, mut generate_secs) = (0.0, 0.0);
    let mut generated = Vec::with_capacity(groups.len());
    for (g, x) in groups.iter().enumerate() {
        let mut streams = GroupStreams::new(seed, g);
        let t = Instant::now();
        let x = defense.apply(&dctx, x, &env.cfg.defense.params, &mut streams.defense)?;
        defense_secs += t.elapsed().as_secs_f64();
        let t = Instant::now();
        generated.push(scenario.generate(env, &x, class, &mut streams)?);
        generate_secs += t.elapsed().as_secs_f64();
    }
    let t = Instant::now();
    let generated = Tensor::concat_rows(&generated)?;
    let gen = embed(env.models.codec.as_ref(), &generated, env.cfg.metrics.features, FeatureSource::Generated)?;
    let report = report(real, &gen, env.cfg.metrics.k)?;
    Ok(Evaluation { report, generated, defense_secs, generate_secs, metric_secs: t.elapsed().as_secs_f64() })
}

pub type CellResult = std::result::Result<(MetricRow, CellTiming), CellFailure>;

fn failure(job: &AttackJob, defense: &str, e: impl std::fmt::Display) -> CellFailure {
    CellFailure {
        attack: job.attack.clone(),
        defense: defense.to_string(),
        seed: job.seed,
        epsilon: job.epsilon.0,
        n_steps: job.n_steps,
        error: e.to_string(),
    }
}

/// One result per configured defense, in configuration order.
pub fn run_job(env: &CellEnv<'_>, job: &AttackJob) -> Vec<CellResult> {
    let defenses = &env.cfg.defense.methods;
    let attacked = match attack_groups(env, job).and_then(|a| Ok((reference_features(env, a.class)?, a))) {
        Ok(a) => a,
        Err(e) => return defenses.iter().map(|d| Err(failure(job, d, &e))).collect(),
    };
    let (real, attacked) = attacked;
    let n_examples = attacked.adversarial.iter().map(|x| x.rows()).sum::<usize>().max(1);
    defenses
        .iter()
        .map(|d| {
            let ev = defend_then_evaluate(env, &attacked.adversarial, attacked.class, d, job.seed, &real)
                .map_err(|e| failure(job, d, e))?;
            let row = MetricRow {
                scenario: env.cfg.scenario.name.clone(),
                attack: job.attack.clone(),
                defense: d.clone(),
                seed: job.seed,
                epsilon: job.epsilon.0,
                n_steps: job.n_steps,
                class: attacked.class,
                fid: ev.report.fid,
                precision: ev.report.precision,
                recall: ev.report.recall,
                n_real: ev.report.n_real,
                n_gen: ev.report.n_gen,
                k: ev.report.k,
                budget_pass: attacked.budget_pass,
                max_deviation: attacked.max_deviation,
            };
            let timing = CellTiming {
                attack: job.attack.clone(),
                defense: d.clone(),
                seed: job.seed,
                epsilon: job.epsilon.0,
                n_steps: job.n_steps,
                attack_secs: attacked.secs,
                attack_secs_per_example: attacked.secs / n_examples as f64,
                defense_secs: ev.defense_secs,
                generate_secs: ev.generate_secs,
                metric_secs: ev.metric_secs,
            };
            Ok((row, timing))
        })
        .collect()
}

/// A panic inside a job becomes a failure of its cells only.
fn run_job_isolated(env: &CellEnv<'_>, job: &AttackJob) -> Vec<CellResult> {
    match catch_unwind(AssertUnwindSafe(|| run_job(env, job))) {
        Ok(r) => r,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            env.cfg.defense.methods.iter().map(|d| Err(failure(job, d, format!("panic: {msg}")))).collect()
        }
    }
}

/// Runs `jobs` on up to `cfg.workers` threads. `on_done` is called on the
/// calling thread, once per finished job, with the job index.
pub fn run_jobs(env: &CellEnv<'_>, jobs: &[AttackJob], mut on_done: impl FnMut(usize, &[CellResult])) -> Vec<Vec<CellResult>> {
    let mut results: Vec<Option<Vec<CellResult>>> = vec![None; jobs.len()];
    let workers = env.cfg.workers.min(jobs.len()).max(1);
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Vec<CellResult>)>();
    std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                if tx.send((i, run_job_isolated(env, &jobs[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            let job = &jobs[i];
            for c in &r {
                match c {
                    Ok((row, _)) => info!(
                        "{} eps {} N {} / {} seed {}: fid {:.4} precision {:.3} recall {:.3}",
                        job.attack, job.epsilon, job.n_steps, row.defense, job.seed, row.fid, row.precision, row.recall
                    ),
                    Err(f) => warn!("{} / {} seed {} failed: {}", f.attack, f.defense, f.seed, f.error),
                }
            }
            on_done(i, &r);
            results[i] = Some(r);
        }
    });
    results.into_iter().map(|r| r.expect("every job reports")).collect()
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub rows: Vec<MetricRow>,
    pub timings: Vec<CellTiming>,
    pub failures: Vec<CellFailure>,
    pub manifest: RunManifest,
    pub run_dir: PathBuf,
}

impl RunOutcome {
    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

fn flatten(results: &[Option<Vec<CellResult>>]) -> (Vec<MetricRow>, Vec<CellTiming>, Vec<CellFailure>) {
    let (mut rows, mut timings, mut failures) = (vec![], vec![], vec![]);
    for c in results.iter().flatten().flatten() {
        match c {
            Ok((r, t)) => {
                rows.push(r.clone());
                timings.push(t.clone());
            }
            Err(f) => failures.push(f.clone()),
        }
    }
    (rows, timings, failures)
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const FAILURES_FILE: &str = "failures.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Runs every cell with already prepared models and writes the run
/// directory. Completed rows are rewritten to `metrics.csv` after each job,
/// so a later failure cannot damage them.
pub fn run_with_models(cfg: &ExperimentConfig, data: &Dataset, models: &Models) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let config_path = dir.join(CONFIG_FILE);
    write_atomic(&config_path, cfg.to_toml()?.as_bytes())?;
    let env = CellEnv { cfg, data, models };
    let jobs = plan_jobs(cfg);
    info!("{} attack jobs x {} defenses", jobs.len(), cfg.defense.methods.len());
    let start = Instant::now();
    let mut done: Vec<Option<Vec<CellResult>>> = vec![None; jobs.len()];
    let mut write_err = None;
    run_jobs(&env, &jobs, |i, r| {
        done[i] = Some(r.to_vec());
        let (rows, _, _) = flatten(&done);
        if let Err(e) = write_csv(&dir.join(METRICS_FILE), &rows, &METRIC_COLUMNS) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let cells_secs = start.elapsed().as_secs_f64();
    let (rows, timings, failures) = flatten(&done);

    let metrics_path = dir.join(METRICS_FILE);
    write_csv(&metrics_path, &rows, &METRIC_COLUMNS)?;
    let timings_path = dir.join(TIMINGS_FILE);
    write_csv(&timings_path, &timings, &TIMING_COLUMNS)?;
    let failures_path = dir.join(FAILURES_FILE);
    write_atomic(&failures_path, &serde_json::to_vec_pretty(&failures)?)?;
    let filter = PlotFilter { scenario: Some(cfg.scenario.name.clone()), ..PlotFilter::default() };
    let plots = emit_plot_data(&rows, &filter, &dir.join("plots"))?;

    let mut artifacts = vec![
        artifact(&dir, &config_path, true)?,
        artifact(&dir, &metrics_path, true)?,
        artifact(&dir, &failures_path, true)?,
        artifact(&dir, &timings_path, false)?,
    ];
    for p in &plots {
        artifacts.push(artifact(&dir, p, true)?);
    }
    let mut stage_secs = BTreeMap::new();
    stage_secs.insert("cells".to_string(), cells_secs);
    stage_secs.insert("attack".to_string(), timings.iter().map(|t| t.attack_secs).sum());
    stage_secs.insert("defense".to_string(), timings.iter().map(|t| t.defense_secs).sum());
    stage_secs.insert("generate".to_string(), timings.iter().map(|t| t.generate_secs).sum());
    stage_secs.insert("metrics".to_string(), timings.iter().map(|t| t.metric_secs).sum());
    let mut manifest = RunManifest {
        config_hash: cfg.hash()?,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoints: models.hashes.clone(),
        timings: stage_secs,
        artifacts,
        rows: rows.clone(),
        failures: failures.clone(),
        content_hash: String::new(),
    };
    manifest.content_hash = manifest.compute_content_hash()?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(RunOutcome { rows, timings, failures, manifest, run_dir: dir })
}

/// Loads the dataset, prepares (or trains) the models and runs every cell.
pub fn run_scenario(cfg: &ExperimentConfig, policy: TrainPolicy) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    let start = Instant::now();
    let models = prepare_models(cfg, &data, policy)?;
    let prep = start.elapsed().as_secs_f64();
    let mut out = run_with_models(cfg, &data, &models)?;
    out.manifest.timings.insert("models".to_string(), prep);
    write_atomic(&out.run_dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&out.manifest)?)?;
    Ok(out)
}

pub fn load_manifest(run_dir: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_slice(&std::fs::read(run_dir.join(MANIFEST_FILE))?)?)
}
