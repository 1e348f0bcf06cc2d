//! Batch Bayesian optimisation over the unit box: fit the surrogate, pick
//! restarts, maximise the acquisition with the configured solver, query the
//! black box and append the batch.

use std::fmt;
use std::time::Instant;

use rand::seq::index::sample_weighted;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acq_grad::grad_fsm;
use crate::acquisition::{
    acq_erm_sample, acq_fsm_subset, inner_matrix_me, minibatch_indices, outer_f_me, AcqForm, AcqKind,
    AcquisitionSpec, SamplePool, ZBuffer, DEFAULT_BETA, DEFAULT_POOL_SIZE, DEFAULT_TAU,
};
use crate::gp::{fit, posterior, BatchPosterior, Dataset, GammaPrior, GpError, GpModel, KernelParams};
use crate::opt_comp::{run_comp, CompAlgo, CompSampling};
use crate::opt_first::{fsm_value, restart_rngs, run_first_order, select_best, FirstOrderAlgo, OptError, OptOutcome};
use crate::opt_second::{clbfgs_run, lbfgs_run, FnSource, LbfgsConfig};
use crate::opt_zero::{cma_es, differential_evolution, random_search, zero_order_comp_eval, CmaConfig, DeConfig};
use crate::{batch_matrix, derive_seed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("black box returned a non-finite value")]
    NonFiniteObservation,
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Opt(#[from] OptError),
}

/// Acquisition maximiser and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    /// `evals` batch evaluations; `None` grants `n_restarts · T · m`.
    RandomSearch {
        #[serde(default)]
        evals: Option<usize>,
    },
    CmaEs(CmaConfig),
    De(DeConfig),
    FirstOrder(FirstOrderAlgo),
    Lbfgs(LbfgsConfig),
    Comp(CompAlgo),
    #[serde(rename = "clbfgs")]
    CLbfgs(LbfgsConfig),
}

impl OptimizerSpec {
    pub fn names() -> Vec<&'static str> {
        let mut v = vec!["rs", "cma-es", "de"];
        v.extend(FirstOrderAlgo::NAMES);
        v.push("l-bfgs");
        v.extend(CompAlgo::NAMES);
        v.push("cl-bfgs");
        v
    }

    /// Default-configured optimiser by name.
    pub fn from_name(name: &str) -> Result<Self, String> {
        let n = name.to_ascii_lowercase();
        Ok(match n.as_str() {
            "rs" | "random-search" | "random_search" => OptimizerSpec::RandomSearch { evals: None },
            "cma-es" | "cmaes" | "cma_es" => OptimizerSpec::CmaEs(CmaConfig::default()),
            "de" => OptimizerSpec::De(DeConfig::default()),
            "l-bfgs" | "lbfgs" | "l-bfgs-b" => OptimizerSpec::Lbfgs(LbfgsConfig::default()),
            "cl-bfgs" | "clbfgs" => OptimizerSpec::CLbfgs(LbfgsConfig::default()),
            _ => {
                if let Ok(a) = n.parse::<FirstOrderAlgo>() {
                    OptimizerSpec::FirstOrder(a)
                } else if let Ok(a) = n.parse::<CompAlgo>() {
                    OptimizerSpec::Comp(a)
                } else {
                    return Err(format!("unknown optimiser '{name}'"));
                }
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerSpec::RandomSearch { .. } => "rs",
            OptimizerSpec::CmaEs(_) => "cma-es",
            OptimizerSpec::De(_) => "de",
            OptimizerSpec::FirstOrder(a) => a.name(),
            OptimizerSpec::Lbfgs(_) => "l-bfgs",
            OptimizerSpec::Comp(a) => a.name(),
            OptimizerSpec::CLbfgs(_) => "cl-bfgs",
        }
    }

    pub fn supports(&self, form: AcqForm) -> bool {
        match self {
            OptimizerSpec::RandomSearch { .. } | OptimizerSpec::CmaEs(_) | OptimizerSpec::De(_) => true,
            OptimizerSpec::FirstOrder(_) | OptimizerSpec::Lbfgs(_) => matches!(form, AcqForm::Erm | AcqForm::Fsm),
            OptimizerSpec::Comp(_) => matches!(form, AcqForm::Comp | AcqForm::CompMe),
            OptimizerSpec::CLbfgs(_) => form == AcqForm::Comp,
        }
    }
}

impl fmt::Display for OptimizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How restarts are drawn from the raw candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestartRule {
    /// Without replacement with probability ∝ `exp(standardised value)`,
    /// forcing a strictly unique argmax.
    Boltzmann,
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub q: usize,
    pub n_steps: usize,
    pub kind: AcqKind,
    pub form: AcqForm,
    pub beta: f64,
    pub tau: f64,
    pub optimizer: OptimizerSpec,
    pub t_opt: usize,
    pub minibatch: usize,
    pub pool_size: usize,
    pub n_raw: usize,
    pub n_restarts: usize,
    pub n_init: usize,
    pub restart_rule: RestartRule,
    /// Iteration budget of each surrogate-fitting restart.
    pub fit_budget: usize,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            q: 16,
            n_steps: 32,
            kind: AcqKind::Ei,
            form: AcqForm::Fsm,
            beta: DEFAULT_BETA,
            tau: DEFAULT_TAU,
            optimizer: OptimizerSpec::FirstOrder(FirstOrderAlgo::adam()),
            t_opt: 64,
            minibatch: 128,
            pool_size: DEFAULT_POOL_SIZE,
            n_raw: 1024,
            n_restarts: 32,
            n_init: 3,
            restart_rule: RestartRule::Boltzmann,
            fit_budget: 50,
            seed: 0,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<(), BoError> {
        let bad = |m: &str| Err(BoError::Config(m.to_string()));
        if self.q == 0 {
            return bad("q must be at least 1");
        }
        if self.n_restarts == 0 || self.n_raw < self.n_restarts {
            return bad("need n_raw >= n_restarts >= 1");
        }
        if self.n_init == 0 {
            return bad("n_init must be at least 1");
        }
        if self.minibatch == 0 || self.pool_size == 0 {
            return bad("minibatch and pool size must be positive");
        }
        if matches!(self.form, AcqForm::Fsm | AcqForm::Comp) && self.minibatch > self.pool_size {
            return bad("minibatch larger than the sample pool");
        }
        if !self.optimizer.supports(self.form) {
            return Err(BoError::Config(format!("{} cannot optimise the {} form", self.optimizer, self.form)));
        }
        Ok(())
    }

    fn spec(&self, incumbent: f64) -> AcquisitionSpec {
        AcquisitionSpec { kind: self.kind, form: self.form, beta: self.beta, tau: self.tau, incumbent }
    }
}

/// One acquisition step (step 0 is the initial design).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoStepRecord {
    pub step: usize,
    /// Queried points in unit coordinates.
    pub batch: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    /// Best raw observation so far.
    pub incumbent: f64,
    /// Full-pool acquisition value of the chosen batch.
    pub acq_value: Option<f64>,
    pub best_restart_value: Option<f64>,
    /// Penalised negative log marginal likelihood of the fitted surrogate.
    pub fit_objective: Option<f64>,
    pub lengthscales: Vec<f64>,
    pub fit_ms: f64,
    pub opt_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoTrace {
    pub records: Vec<BoStepRecord>,
}

impl BoTrace {
    pub fn incumbents(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.incumbent).collect()
    }
}

/// Loop state carried between steps.
#[derive(Debug, Clone)]
pub struct BoState {
    pub dataset: Dataset,
    pub params: KernelParams,
    pub step: usize,
}

const PURPOSE_INIT: u64 = 1;
const PURPOSE_POOL: u64 = 2;
const PURPOSE_RESTART: u64 = 3;
const PURPOSE_OPT: u64 = 4;

/// Draws `n_raw` uniform batches, scores them on the full pool and keeps
/// `n_restarts` of them; returns `(batch, value)` pairs.
#[allow(clippy::too_many_arguments)]
pub fn select_restarts<R: Rng + ?Sized>(
    model: &GpModel,
    spec: &AcquisitionSpec,
    pool: &SamplePool,
    q: usize,
    n_raw: usize,
    n_restarts: usize,
    rule: RestartRule,
    rng: &mut R,
) -> Vec<(Vec<f64>, f64)> {
    let dq = q * model.dim();
    let raw: Vec<Vec<f64>> = (0..n_raw).map(|_| (0..dq).map(|_| rng.gen::<f64>()).collect()).collect();
    let values: Vec<f64> =
        raw.iter().map(|x| fsm_value(spec, model, pool, x, q).unwrap_or(f64::NEG_INFINITY)).collect();
    let chosen = choose_restarts(&values, n_restarts, rule, rng);
    chosen.into_iter().map(|i| (raw[i].clone(), values[i])).collect()
}

/// Indices picked from candidate values under `rule`.
pub fn choose_restarts<R: Rng + ?Sized>(values: &[f64], n: usize, rule: RestartRule, rng: &mut R) -> Vec<usize> {
    let n = n.min(values.len());
    if n == values.len() {
        return (0..n).collect();
    }
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    if rule == RestartRule::TopK {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| key(values[b]).total_cmp(&key(values[a])).then(a.cmp(&b)));
        idx.truncate(n);
        return idx;
    }
    let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / finite.len().max(1) as f64;
    let std = var.sqrt();
    let z: Vec<f64> = values
        .iter()
        .map(|&v| if !v.is_finite() { f64::NEG_INFINITY } else if std > 0.0 { (v - mean) / std } else { 0.0 })
        .collect();
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::with_capacity(n);
    let top: Vec<usize> = (0..z.len()).filter(|&i| z[i] == zmax).collect();
    if top.len() == 1 && zmax.is_finite() {
        out.push(top[0]);
    }
    // small floor keeps every candidate drawable once the finite ones run out
    let weight = |i: usize| if out.contains(&i) { 0.0 } else { ((z[i] - zmax).exp()).max(1e-300) };
    let rest: Vec<usize> = match sample_weighted(rng, z.len(), weight, n - out.len()) {
        Ok(s) => s.into_iter().collect(),
        Err(_) => (0..z.len()).filter(|i| !out.contains(i)).take(n - out.len()).collect(),
    };
    out.extend(rest);
    out
}

fn form_value<R: Rng + ?Sized>(
    spec: &AcquisitionSpec,
    post: &BatchPosterior,
    pool: &SamplePool,
    m: usize,
    rng: &mut R,
) -> f64 {
    match spec.form {
        AcqForm::Fsm => acq_fsm_subset(spec, post, pool, &minibatch_indices(pool.len(), m, rng)),
        AcqForm::Erm => acq_erm_sample(spec, post, m, rng),
        AcqForm::Comp => zero_order_comp_eval(spec, post, pool, m, rng),
        AcqForm::CompMe => outer_f_me(spec.kind, &inner_matrix_me(spec, post, m, rng)),
    }
}

/// Runs the configured maximiser from the given restarts.
pub fn maximise_acquisition<R: Rng + ?Sized>(
    cfg: &BoConfig,
    model: &GpModel,
    spec: &AcquisitionSpec,
    pool: &SamplePool,
    restarts: &[Vec<f64>],
    rng: &mut R,
) -> Result<OptOutcome, BoError> {
    let q = cfg.q;
    let dq = q * model.dim();
    let (t, m) = (cfg.t_opt, cfg.minibatch);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut objective = |x: &[f64]| -> f64 {
        match posterior(model, &batch_matrix(x, q), false) {
            Ok(post) => form_value(spec, &post, pool, m, &mut eval_rng),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let best_start = || {
        select_best(restarts, |x| fsm_value(spec, model, pool, x, q)).map(|(x, _)| x).ok_or(OptError::AllRestartsFailed)
    };
    let single = |x: Vec<f64>| {
        let value = fsm_value(spec, model, pool, &x, q).ok_or(OptError::AllRestartsFailed)?;
        Ok::<_, BoError>(OptOutcome { finals: vec![x.clone()], x, value })
    };
    match &cfg.optimizer {
        OptimizerSpec::RandomSearch { evals } => {
            let budget = evals.unwrap_or(cfg.n_restarts * t * m);
            single(random_search(&mut objective, dq, budget, rng).x)
        }
        OptimizerSpec::CmaEs(c) => {
            let start = best_start()?;
            single(cma_es(&mut objective, &start, t, *c, rng).x)
        }
        OptimizerSpec::De(c) => single(differential_evolution(&mut objective, restarts.to_vec(), t, *c, rng).x),
        OptimizerSpec::FirstOrder(a) => Ok(run_first_order(model, spec, pool, restarts, q, *a, t, m, rng)?),
        OptimizerSpec::Comp(a) => {
            let sampling = match cfg.form {
                AcqForm::CompMe => CompSampling::Fresh { k: m },
                _ => CompSampling::Pool { pool, k1: m, k2: m },
            };
            Ok(run_comp(model, spec, pool, restarts, q, *a, t, sampling, rng)?)
        }
        OptimizerSpec::Lbfgs(c) => {
            let mut rngs = restart_rngs(rng, restarts.len());
            let finals: Vec<Vec<f64>> = restarts
                .iter()
                .zip(rngs.iter_mut())
                .map(|(x0, r)| {
                    // fixed minibatch for the whole run
                    let zs = match spec.form {
                        AcqForm::Erm => ZBuffer::standard_normal(m, q, r),
                        _ => {
                            let idx = minibatch_indices(pool.len(), m, r);
                            let data = idx.iter().flat_map(|&i| pool.z(i).iter().copied()).collect();
                            ZBuffer::from_vec(data, q)
                        }
                    };
                    let zrefs: Vec<&[f64]> = zs.iter().collect();
                    let mut src = FnSource(|x: &[f64]| {
                        let g = grad_fsm(spec, model, &batch_matrix(x, q), &zrefs).ok()?;
                        Some((g.value, g.g))
                    });
                    lbfgs_run(&mut src, x0, &vec![0.0; dq], &vec![1.0; dq], t, c).x
                })
                .collect();
            finish(spec, model, pool, q, finals)
        }
        OptimizerSpec::CLbfgs(c) => {
            let mut rngs = restart_rngs(rng, restarts.len());
            let finals = restarts
                .iter()
                .zip(rngs.iter_mut())
                .map(|(x0, r)| clbfgs_run(spec, model, pool, x0, q, t, m, m, r, c).x)
                .collect();
            finish(spec, model, pool, q, finals)
        }
    }
}

fn finish(
    spec: &AcquisitionSpec,
    model: &GpModel,
    pool: &SamplePool,
    q: usize,
    finals: Vec<Vec<f64>>,
) -> Result<OptOutcome, BoError> {
    let (x, value) = select_best(&finals, |x| fsm_value(spec, model, pool, x, q)).ok_or(OptError::AllRestartsFailed)?;
    Ok(OptOutcome { x, value, finals })
}

fn split_batch(x: &[f64], q: usize) -> Vec<Vec<f64>> {
    x.chunks(x.len() / q).map(|c| c.to_vec()).collect()
}

fn observe<F: FnMut(&[f64]) -> f64>(batch: &[Vec<f64>], black_box: &mut F) -> Result<Vec<f64>, BoError> {
    batch
        .iter()
        .map(|p| {
            let v = black_box(p);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(BoError::NonFiniteObservation)
            }
        })
        .collect()
}

fn incumbent(ds: &Dataset) -> f64 {
    ds.raw_outputs().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Initial design of `n_init` uniform points.
pub fn bo_init<F: FnMut(&[f64]) -> f64>(
    cfg: &BoConfig,
    dim: usize,
    black_box: &mut F,
) -> Result<(BoState, BoStepRecord), BoError> {
    cfg.validate()?;
    if dim == 0 {
        return Err(BoError::Config("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0, PURPOSE_INIT]));
    let batch: Vec<Vec<f64>> = (0..cfg.n_init).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect();
    let values = observe(&batch, black_box)?;
    let dataset = Dataset::new(batch.clone(), values.clone())?;
    let record = BoStepRecord {
        step: 0,
        batch,
        values,
        incumbent: incumbent(&dataset),
        acq_value: None,
        best_restart_value: None,
        fit_objective: None,
        lengthscales: Vec::new(),
        fit_ms: 0.0,
        opt_ms: 0.0,
    };
    Ok((BoState { dataset, params: KernelParams::default_for(dim), step: 0 }, record))
}

/// Refit, maximise, query, append.
pub fn bo_step<F: FnMut(&[f64]) -> f64>(
    cfg: &BoConfig,
    state: &mut BoState,
    black_box: &mut F,
) -> Result<BoStepRecord, BoError> {
    let step = state.step + 1;
    let q = cfg.q;
    let prior = GammaPrior::default();
    let t0 = Instant::now();
    let model = fit(&state.dataset, &state.params, &prior, cfg.fit_budget)?;
    let fit_ms = t0.elapsed().as_secs_f64() * 1e3;
    let fit_objective = crate::gp::nlml(&model.dataset, &model.params)
        .ok()
        .map(|v| v + prior.neg_log_density(&model.params.lengthscales).0);

    let spec = cfg.spec(model.dataset.incumbent());
    let t1 = Instant::now();
    let pool = SamplePool::new(cfg.pool_size, q, derive_seed(&[cfg.seed, step as u64, PURPOSE_POOL]));
    let mut rrng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, step as u64, PURPOSE_RESTART]));
    let starts = select_restarts(&model, &spec, &pool, q, cfg.n_raw, cfg.n_restarts, cfg.restart_rule, &mut rrng);
    let restarts: Vec<Vec<f64>> = starts.iter().map(|(x, _)| x.clone()).collect();
    let mut orng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, step as u64, PURPOSE_OPT]));
    let outcome = maximise_acquisition(cfg, &model, &spec, &pool, &restarts, &mut orng);
    // the returned batch never scores below the best starting batch
    let mut candidates = match &outcome {
        Ok(o) => o.finals.clone(),
        Err(_) => Vec::new(),
    };
    candidates.extend(restarts);
    let (x, acq_value) = select_best(&candidates, |x| fsm_value(&spec, &model, &pool, x, q))
        .ok_or(BoError::Opt(OptError::AllRestartsFailed))?;
    let opt_ms = t1.elapsed().as_secs_f64() * 1e3;

    let batch = split_batch(&x, q);
    let values = observe(&batch, black_box)?;
    state.dataset.extend(batch.clone(), values.clone())?;
    state.params = model.params.clone();
    state.step = step;
    let best_restart_value = starts.iter().map(|(_, v)| *v).filter(|v| v.is_finite()).reduce(f64::max);
    Ok(BoStepRecord {
        step,
        batch,
        values,
        incumbent: incumbent(&state.dataset),
        acq_value: Some(acq_value),
        best_restart_value,
        fit_objective,
        lengthscales: model.params.lengthscales.clone(),
        fit_ms,
        opt_ms,
    })
}

/// Initial design then `n_steps` acquisition steps.
pub fn run_bo<F: FnMut(&[f64]) -> f64>(cfg: &BoConfig, dim: usize, mut black_box: F) -> Result<BoTrace, BoError> {
    let (mut state, first) = bo_init(cfg, dim, &mut black_box)?;
    let mut records = vec![first];
    for _ in 0..cfg.n_steps {
        records.push(bo_step(cfg, &mut state, &mut black_box)?);
    }
    Ok(BoTrace { records })
}
