//! Experiment sweeps over (task, acquisition, optimiser) tuples: parallel
//! seeded execution, CSV traces and an aggregate JSON summary.

use compbo_core::bench::{normalised_regret, SyntheticTask, TaskError};
use compbo_core::bo::{bo_init, bo_step, BoConfig, BoError};
use compbo_core::derive_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::PathBuf;
use thiserror::Error;

pub const CSV_HEADER: [&str; 13] =
    ["tuple_id", "task", "dim", "acq", "form", "optimizer", "seed", "step", "incumbent", "regret", "opt_ms", "fit_ms", "status"];

/// Environment variable overriding the number of worker threads.
pub const JOBS_ENV: &str = "BO_BENCH_JOBS";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Bo(#[from] BoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Black-box function, acquisition and optimiser with their loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTuple {
    pub task: String,
    pub dim: usize,
    /// Overrides the sweep-wide seed list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(flatten)]
    pub bo: BoConfig,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_timing() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub tuples: Vec<ExperimentTuple>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Worker threads; `None` defers to the environment, then to rayon.
    #[serde(default)]
    pub jobs: Option<usize>,
    /// When false every wall-time field is written as 0, making outputs
    /// byte-identical across reruns.
    #[serde(default = "default_timing")]
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig { tuples: Vec::new(), seeds: default_seeds(), output: None, jobs: None, timing: true }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, RunnerError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds_for(&self, tuple: &ExperimentTuple) -> Vec<u64> {
        tuple.seeds.clone().unwrap_or_else(|| self.seeds.clone())
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        for (i, t) in self.tuples.iter().enumerate() {
            SyntheticTask::by_name(&t.task, t.dim)?;
            t.bo.validate().map_err(|e| RunnerError::Config(format!("tuple {i}: {e}")))?;
            let seeds = self.seeds_for(t);
            if seeds.iter().collect::<HashSet<_>>().len() != seeds.len() {
                return Err(RunnerError::Config(format!("tuple {i}: seeds must be distinct")));
            }
        }
        if self.jobs == Some(0) {
            return Err(RunnerError::Config("jobs must be positive".into()));
        }
        Ok(())
    }

    /// Every (tuple, seed) pair in tuple-major order.
    pub fn jobs_list(&self) -> Vec<(usize, u64)> {
        self.tuples.iter().enumerate().flat_map(|(i, t)| self.seeds_for(t).into_iter().map(move |s| (i, s))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub incumbent: f64,
    pub regret: f64,
    pub opt_ms: f64,
    pub fit_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tuple_id: usize,
    pub task: String,
    pub dim: usize,
    pub acq: String,
    pub form: String,
    pub optimizer: String,
    pub seed: u64,
    pub rows: Vec<StepRow>,
    /// `ok` or `failed: <reason>`.
    pub status: String,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn final_regret(&self) -> Option<f64> {
        self.rows.last().map(|r| r.regret)
    }
}

/// Runs one tuple for one seed against `black_box` (unit-box coordinates).
/// Errors end the run early and are reported in `status`; the rows recorded
/// up to that point are kept.
pub fn run_single<F: FnMut(&[f64]) -> f64>(
    tuple_id: usize,
    tuple: &ExperimentTuple,
    seed: u64,
    optimum: f64,
    timing: bool,
    mut black_box: F,
) -> RunRecord {
    let cfg = BoConfig { seed: derive_seed(&[tuple_id as u64, seed]), ..tuple.bo.clone() };
    let mut incumbents = Vec::new();
    let mut times = Vec::new();
    let mut status = "ok".to_string();
    match bo_init(&cfg, tuple.dim, &mut black_box) {
        Ok((mut state, first)) => {
            incumbents.push(first.incumbent);
            times.push((first.opt_ms, first.fit_ms));
            for _ in 0..cfg.n_steps {
                match bo_step(&cfg, &mut state, &mut black_box) {
                    Ok(r) => {
                        incumbents.push(r.incumbent);
                        times.push((r.opt_ms, r.fit_ms));
                    }
                    Err(e) => {
                        status = format!("failed: {e}");
                        break;
                    }
                }
            }
        }
        Err(e) => status = format!("failed: {e}"),
    }
    let rows = normalised_regret(&incumbents, optimum)
        .into_iter()
        .zip(times)
        .map(|(r, (opt_ms, fit_ms))| StepRow {
            step: r.step,
            incumbent: r.incumbent,
            regret: r.regret,
            opt_ms: if timing { opt_ms } else { 0.0 },
            fit_ms: if timing { fit_ms } else { 0.0 },
        })
        .collect();
    RunRecord {
        tuple_id,
        task: tuple.task.clone(),
        dim: tuple.dim,
        acq: tuple.bo.kind.to_string(),
        form: tuple.bo.form.to_string(),
        optimizer: tuple.bo.optimizer.name().to_string(),
        seed,
        rows,
        status,
    }
}

fn run_job(cfg: &ExperimentConfig, tuple_id: usize, seed: u64) -> RunRecord {
    let tuple = &cfg.tuples[tuple_id];
    match SyntheticTask::by_name(&tuple.task, tuple.dim) {
        Ok(task) => run_single(tuple_id, tuple, seed, task.optimum_value, cfg.timing, |u| {
            task.evaluate_unit(u).unwrap_or(f64::NAN)
        }),
        Err(e) => RunRecord {
            tuple_id,
            task: tuple.task.clone(),
            dim: tuple.dim,
            acq: tuple.bo.kind.to_string(),
            form: tuple.bo.form.to_string(),
            optimizer: tuple.bo.optimizer.name().to_string(),
            seed,
            rows: Vec::new(),
            status: format!("failed: {e}"),
        },
    }
}

/// Worker count: config, then [`JOBS_ENV`], then rayon's default.
pub fn resolve_jobs(cfg: &ExperimentConfig) -> Option<usize> {
    cfg.jobs.or_else(|| std::env::var(JOBS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0))
}

/// Executes every (tuple, seed) run in parallel. Results come back in
/// tuple-major, seed order regardless of the thread count.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>, RunnerError> {
    let jobs = cfg.jobs_list();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = resolve_jobs(cfg) {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| RunnerError::Config(e.to_string()))?;
    Ok(pool.install(|| jobs.par_iter().map(|&(t, s)| run_job(cfg, t, s)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub optimizer: String,
    pub form: String,
    pub runs: usize,
    pub mean_final_regret: f64,
    pub median_final_regret: f64,
    /// Share of tasks on which this group had the lowest mean final regret,
    /// in percent, with ties split evenly.
    pub best_pct: f64,
    /// Mean regret at each step over the runs that reached it.
    pub mean_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub groups: Vec<GroupSummary>,
    pub failed_runs: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregates successful runs per (optimiser, form). A task is a
/// (function, dimension, acquisition) triple.
pub fn summarise(records: &[RunRecord]) -> Summary {
    type Key = (String, String);
    let ok: Vec<&RunRecord> = records.iter().filter(|r| r.is_ok() && !r.rows.is_empty()).collect();
    let mut finals: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    let mut curves: BTreeMap<Key, Vec<(f64, usize)>> = BTreeMap::new();
    let mut per_task: BTreeMap<(String, usize, String), BTreeMap<Key, Vec<f64>>> = BTreeMap::new();
    for r in &ok {
        let key = (r.optimizer.clone(), r.form.clone());
        let last = r.final_regret().expect("non-empty rows");
        finals.entry(key.clone()).or_default().push(last);
        let curve = curves.entry(key.clone()).or_default();
        for (i, row) in r.rows.iter().enumerate() {
            if curve.len() <= i {
                curve.push((0.0, 0));
            }
            curve[i].0 += row.regret;
            curve[i].1 += 1;
        }
        per_task.entry((r.task.clone(), r.dim, r.acq.clone())).or_default().entry(key).or_default().push(last);
    }
    let mut credit: BTreeMap<Key, (f64, usize)> = BTreeMap::new();
    for groups in per_task.values() {
        let means: Vec<(&Key, f64)> = groups.iter().map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect();
        let best = means.iter().map(|(_, m)| *m).fold(f64::INFINITY, f64::min);
        let winners = means.iter().filter(|(_, m)| *m == best).count() as f64;
        for (k, m) in &means {
            let c = credit.entry((*k).clone()).or_default();
            c.1 += 1;
            if *m == best {
                c.0 += 1.0 / winners;
            }
        }
    }
    let groups = finals
        .into_iter()
        .map(|(key, mut v)| {
            let (won, tasks) = credit[&key];
            GroupSummary {
                runs: v.len(),
                mean_final_regret: v.iter().sum::<f64>() / v.len() as f64,
                median_final_regret: median(&mut v),
                best_pct: 100.0 * won / tasks as f64,
                mean_curve: curves[&key].iter().map(|(s, n)| s / *n as f64).collect(),
                optimizer: key.0,
                form: key.1,
            }
        })
        .collect();
    Summary { groups, failed_runs: records.iter().filter(|r| !r.is_ok()).count() }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    tuple_id: usize,
    task: String,
    dim: usize,
    acq: String,
    form: String,
    optimizer: String,
    seed: u64,
    step: usize,
    incumbent: f64,
    regret: f64,
    opt_ms: f64,
    fit_ms: f64,
    status: String,
}

/// One line per recorded step. A run that failed before recording anything
/// has no rows; its failure is counted in the summary.
pub fn write_csv<W: Write>(records: &[RunRecord], out: W) -> Result<(), RunnerError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        for row in &r.rows {
            w.serialize(CsvRow {
                tuple_id: r.tuple_id,
                task: r.task.clone(),
                dim: r.dim,
                acq: r.acq.clone(),
                form: r.form.clone(),
                optimizer: r.optimizer.clone(),
                seed: r.seed,
                step: row.step,
                incumbent: row.incumbent,
                regret: row.regret,
                opt_ms: row.opt_ms,
                fit_ms: row.fit_ms,
                status: r.status.clone(),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds run records from [`write_csv`] output.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<RunRecord>, RunnerError> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out: Vec<RunRecord> = Vec::new();
    for row in rd.deserialize() {
        let row: CsvRow = row?;
        let step = StepRow { step: row.step, incumbent: row.incumbent, regret: row.regret, opt_ms: row.opt_ms, fit_ms: row.fit_ms };
        match out.last_mut() {
            Some(r) if r.tuple_id == row.tuple_id && r.seed == row.seed => r.rows.push(step),
            _ => out.push(RunRecord {
                tuple_id: row.tuple_id,
                task: row.task,
                dim: row.dim,
                acq: row.acq,
                form: row.form,
                optimizer: row.optimizer,
                seed: row.seed,
                rows: vec![step],
                status: row.status,
            }),
        }
    }
    Ok(out)
}

pub fn write_summary<W: Write>(summary: &Summary, mut out: W) -> Result<(), RunnerError> {
    serde_json::to_writer_pretty(&mut out, summary)?;
    out.write_all(b"\n")?;
    Ok(())
}
