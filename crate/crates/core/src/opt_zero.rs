//! Zero-order maximisers over `[0,1]^n`: random search, CMA-ES and
//! differential evolution. Out-of-box proposals are clipped before evaluation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acq_grad::{outer_value, Zeta};
use crate::acquisition::{minibatch_indices, AcquisitionSpec, SamplePool};
use crate::gp::BatchPosterior;
use crate::project_unit;

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroOrderResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

/// Best of `budget` uniform samples from the unit box.
pub fn random_search<F, R>(mut objective: F, dim: usize, budget: usize, rng: &mut R) -> ZeroOrderResult
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    assert!(budget >= 1, "random search needs at least one evaluation");
    let mut x = vec![0.0; dim];
    let mut best = ZeroOrderResult { x: Vec::new(), value: f64::NEG_INFINITY, evals: 0 };
    for _ in 0..budget {
        x.iter_mut().for_each(|v| *v = rng.gen::<f64>());
        let f = objective(&x);
        best.evals += 1;
        if best.x.is_empty() || f > best.value {
            best.value = f;
            best.x.clone_from(&x);
        }
    }
    best
}

/// Strategy constants; `None` picks the usual dimension-dependent default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaConfig {
    pub offspring: usize,
    /// Number of parents `κ`; defaults to `offspring / 2`.
    pub parents: Option<usize>,
    pub sigma0: f64,
    /// Mean learning rate `η_μ`.
    pub mean_rate: f64,
    pub c_sigma: Option<f64>,
    pub c_path: Option<f64>,
    pub c1: Option<f64>,
    pub c_mu: Option<f64>,
    /// Threshold multiplier on `√n` for the anisotropic path indicator.
    pub stall_eta: f64,
}

impl Default for CmaConfig {
    fn default() -> Self {
        CmaConfig {
            offspring: 32,
            parents: None,
            sigma0: 0.2,
            mean_rate: 1.0,
            c_sigma: None,
            c_path: None,
            c1: None,
            c_mu: None,
            stall_eta: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CmaState {
    pub mean: DVector<f64>,
    pub step: f64,
    pub cov: DMatrix<f64>,
    pub path_sigma: DVector<f64>,
    pub path_cov: DVector<f64>,
    pub generation: usize,
    /// Best clipped point seen so far and its value.
    pub best: Option<(Vec<f64>, f64)>,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_path: f64,
    c1: f64,
    c_mu: f64,
    chi_n: f64,
    cfg: CmaConfig,
}

impl CmaState {
    pub fn new(mean: &[f64], cfg: CmaConfig) -> Self {
        assert!(cfg.offspring > 2, "CMA-ES needs more than two offspring");
        let n = mean.len();
        let nf = n as f64;
        let kappa = cfg.parents.unwrap_or(cfg.offspring / 2).clamp(1, cfg.offspring);
        // w_i ∝ κ − i + 1
        let raw: Vec<f64> = (1..=kappa).map(|i| (kappa - i + 1) as f64).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = cfg.c_sigma.unwrap_or((mu_eff + 2.0) / (nf + mu_eff + 5.0));
        let d_sigma = 1.0 + c_sigma;
        let c_path = cfg.c_path.unwrap_or((4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf));
        let c1 = cfg.c1.unwrap_or(2.0 / ((nf + 1.3).powi(2) + mu_eff));
        let c_mu = cfg
            .c_mu
            .unwrap_or((1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff)));
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        CmaState {
            mean: DVector::from_column_slice(mean),
            step: cfg.sigma0,
            cov: DMatrix::identity(n, n),
            path_sigma: DVector::zeros(n),
            path_cov: DVector::zeros(n),
            generation: 0,
            best: None,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_path,
            c1,
            c_mu,
            chi_n,
            cfg,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ = B D² Bᵀ`, returning `B D` and `B D⁻¹ Bᵀ`, jittering until positive.
    fn factor(&mut self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.cov.nrows();
        let mut jitter = 0.0;
        loop {
            let mut c = self.cov.clone();
            c = (&c + c.transpose()) * 0.5;
            for i in 0..n {
                c[(i, i)] += jitter;
            }
            let eig = SymmetricEigen::new(c.clone());
            let min = eig.eigenvalues.min();
            if min > 0.0 && eig.eigenvalues.iter().all(|v| v.is_finite()) {
                self.cov = c;
                let d = eig.eigenvalues.map(f64::sqrt);
                let b = eig.eigenvectors;
                let bd = &b * DMatrix::from_diagonal(&d);
                let inv_sqrt = &b * DMatrix::from_diagonal(&d.map(|v| 1.0 / v)) * b.transpose();
                return (bd, inv_sqrt);
            }
            let scale = self.cov.diagonal().mean().abs().max(1e-300);
            jitter = if jitter == 0.0 { 1e-10 * scale } else { jitter * 10.0 };
            if !jitter.is_finite() || jitter > scale * 1e6 {
                self.cov = DMatrix::identity(n, n);
                jitter = 0.0;
            }
        }
    }
}

/// One generation: sample, clip, rank, then update mean, step size and covariance.
pub fn cma_step<F, R>(state: &mut CmaState, mut objective: F, rng: &mut R)
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let n = state.mean.len();
    let lambda = state.cfg.offspring;
    let (bd, inv_sqrt) = state.factor();
    let sigma = state.step;

    let mut pop: Vec<(DVector<f64>, f64)> = Vec::with_capacity(lambda);
    for _ in 0..lambda {
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x = &state.mean + (&bd * z) * sigma;
        project_unit(x.as_mut_slice());
        let f = objective(x.as_slice());
        let f = if f.is_finite() { f } else { f64::NEG_INFINITY };
        if state.best.as_ref().is_none_or(|(_, b)| f > *b) {
            state.best = Some((x.as_slice().to_vec(), f));
        }
        pop.push((x, f));
    }
    // best first; stable so equal values keep sampling order
    pop.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));

    let old_mean = state.mean.clone();
    let mut shift = DVector::zeros(n);
    for (w, (x, _)) in state.weights.iter().zip(&pop) {
        shift += (x - &old_mean) * *w;
    }
    state.mean = &old_mean + &shift * state.cfg.mean_rate;
    let y = (&state.mean - &old_mean) / sigma;

    let cs = state.c_sigma;
    state.path_sigma = &state.path_sigma * (1.0 - cs) + (&inv_sqrt * &y) * ((cs * (2.0 - cs) * state.mu_eff).sqrt());
    let ps_norm = state.path_sigma.norm();
    state.step = sigma * ((cs / state.d_sigma) * (ps_norm / state.chi_n - 1.0)).exp();
    if !state.step.is_finite() || state.step <= 0.0 {
        state.step = state.cfg.sigma0;
    }
    state.step = state.step.clamp(1e-12, 1e6);

    let cc = state.c_path;
    let h = if ps_norm <= state.cfg.stall_eta * (n as f64).sqrt() { 1.0 } else { 0.0 };
    state.path_cov = &state.path_cov * (1.0 - cc) + &y * (h * (cc * (2.0 - cc) * state.mu_eff).sqrt());

    let wsum: f64 = state.weights.iter().sum();
    let discount = 1.0 - state.c1 - state.c_mu * wsum;
    let mut rank_mu = DMatrix::zeros(n, n);
    for (w, (x, _)) in state.weights.iter().zip(&pop) {
        let d = (x - &old_mean) / sigma;
        rank_mu += (&d * d.transpose()) * *w;
    }
    state.cov = &state.cov * discount + (&state.path_cov * state.path_cov.transpose()) * state.c1 + rank_mu * state.c_mu;
    if state.cov.iter().any(|v| !v.is_finite()) {
        state.cov = DMatrix::identity(n, n);
        state.path_cov.fill(0.0);
        state.path_sigma.fill(0.0);
    }
    state.generation += 1;
}

/// Runs `generations` CMA-ES generations from `mean` and returns the best point seen.
pub fn cma_es<F, R>(objective: F, mean: &[f64], generations: usize, cfg: CmaConfig, rng: &mut R) -> ZeroOrderResult
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let mut objective = objective;
    let mut start = mean.to_vec();
    project_unit(&mut start);
    let f0 = objective(&start);
    let mut state = CmaState::new(&start, cfg);
    state.best = Some((start, f0));
    for _ in 0..generations {
        cma_step(&mut state, &mut objective, rng);
    }
    let (x, value) = state.best.expect("initial point recorded");
    ZeroOrderResult { x, value, evals: 1 + generations * cfg.offspring }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeConfig {
    pub f_scale: f64,
    pub p_mutation: f64,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig { f_scale: 0.7, p_mutation: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DePopulation {
    pub members: Vec<Vec<f64>>,
    pub fitness: Vec<f64>,
    pub f_scale: f64,
    pub p_mutation: f64,
}

impl DePopulation {
    pub fn new<F: FnMut(&[f64]) -> f64>(members: Vec<Vec<f64>>, mut objective: F, cfg: DeConfig) -> Self {
        assert!(members.len() >= 4, "DE needs a population of at least four");
        let members: Vec<Vec<f64>> = members
            .into_iter()
            .map(|mut m| {
                project_unit(&mut m);
                m
            })
            .collect();
        let fitness = members.iter().map(|m| objective(m)).collect();
        DePopulation { members, fitness, f_scale: cfg.f_scale, p_mutation: cfg.p_mutation }
    }

    pub fn best(&self) -> (usize, f64) {
        let mut b = 0;
        for i in 1..self.fitness.len() {
            if self.fitness[i] > self.fitness[b] {
                b = i;
            }
        }
        (b, self.fitness[b])
    }
}

/// Mutation candidate for member `i`: returns the candidate before clipping.
pub fn de_candidate<R: Rng + ?Sized>(pop: &DePopulation, i: usize, rng: &mut R) -> Vec<f64> {
    let p = pop.members.len();
    let n = pop.members[i].len();
    let mut pick = || loop {
        let k = rng.gen_range(0..p);
        if k != i {
            break k;
        }
    };
    let a = pick();
    let b = loop {
        let k = pick();
        if k != a {
            break k;
        }
    };
    let c = loop {
        let k = pick();
        if k != a && k != b {
            break k;
        }
    };
    let forced = rng.gen_range(0..n);
    let (ma, mb, mc) = (&pop.members[a], &pop.members[b], &pop.members[c]);
    (0..n)
        .map(|l| {
            if l == forced || rng.gen::<f64>() < pop.p_mutation {
                ma[l] + pop.f_scale * (mb[l] - mc[l])
            } else {
                pop.members[i][l]
            }
        })
        .collect()
}

/// One generation; a member is replaced only by a strictly better candidate.
pub fn de_step<F, R>(pop: &mut DePopulation, mut objective: F, rng: &mut R)
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let p = pop.members.len();
    let candidates: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let mut c = de_candidate(pop, i, rng);
            project_unit(&mut c);
            c
        })
        .collect();
    for (i, c) in candidates.into_iter().enumerate() {
        let f = objective(&c);
        if f > pop.fitness[i] {
            pop.members[i] = c;
            pop.fitness[i] = f;
        }
    }
}

pub fn differential_evolution<F, R>(
    mut objective: F,
    init: Vec<Vec<f64>>,
    generations: usize,
    cfg: DeConfig,
    rng: &mut R,
) -> ZeroOrderResult
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let mut pop = DePopulation::new(init, &mut objective, cfg);
    let p = pop.members.len();
    for _ in 0..generations {
        de_step(&mut pop, &mut objective, rng);
    }
    let (b, value) = pop.best();
    ZeroOrderResult { x: pop.members[b].clone(), value, evals: p * (generations + 1) }
}

/// `f(ḡ_K)` with `ḡ_K` the mean of `k` sampled inner instances.
pub fn zero_order_comp_eval<R: Rng + ?Sized>(
    spec: &AcquisitionSpec,
    post: &BatchPosterior,
    pool: &SamplePool,
    k: usize,
    rng: &mut R,
) -> f64 {
    let idx = minibatch_indices(pool.len(), k, rng);
    let mut zeta = Zeta::for_pool(post.q(), pool.len());
    zeta.accumulate_pool(spec, post, pool, &idx, 1.0);
    outer_value(spec.kind, &zeta)
}
