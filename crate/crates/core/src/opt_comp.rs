//! Compositional ascent on `f(E_ω[g_ω(x)])`: a main update driven by the
//! compositional gradient at `(x_t, ζ_t)`, an auxiliary point `u_{t+1}`, and a
//! tracker `ζ_{t+1} = (1 − r_t) ζ_t + r_t ḡ(u_{t+1})`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acq_grad::{grad_comp, grad_comp_me, Zeta};
use crate::acquisition::{acq_comp, minibatch_indices, AcqForm, AcquisitionSpec, SamplePool, ZBuffer};
use crate::gp::{posterior, GpModel};
use crate::opt_first::{restart_rngs, select_best, AdamParams, FirstOrderAlgo, OptError, OptOutcome};
use crate::{batch_matrix, project_unit};

/// Two-timescale schedules `η_t = a t^{−lr_d}` and `β_t = b t^{−beta_d}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScgaParams {
    pub a: f64,
    pub lr_d: f64,
    pub b: f64,
    pub beta_d: f64,
}

impl Default for ScgaParams {
    fn default() -> Self {
        ScgaParams { a: 0.01, lr_d: 0.75, b: 0.316, beta_d: 0.5 }
    }
}

/// `γ₁,t = C_γ μ^{μ_d t}`, `γ₂,t = 1 − (1 − γ₁,t)² / t^{γ₂d}`,
/// `η_t = lr √(1 − γ₂,t) / ((1 − γ₁,t) t^{α_d})`; `fixed` overrides both γ's
/// with constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CAdamParams {
    pub lr: f64,
    pub beta: f64,
    pub mu: f64,
    pub c_gamma: f64,
    pub alpha_d: f64,
    pub mu_d: f64,
    pub gamma2_d: f64,
    pub eps: f64,
    pub fixed: Option<(f64, f64)>,
}

impl Default for CAdamParams {
    fn default() -> Self {
        CAdamParams {
            lr: 3.16e-3,
            beta: 0.0316,
            mu: 0.316,
            c_gamma: 0.75,
            alpha_d: 0.26,
            mu_d: 1.0,
            gamma2_d: 0.5,
            eps: 1e-8,
            fixed: None,
        }
    }
}

/// `τ_t = t^{−γ}`; gradient average rate `a τ_t`, tracker rate `b τ_t`,
/// step `τ_t / β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NasaParams {
    pub a: f64,
    pub b: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for NasaParams {
    fn default() -> Self {
        NasaParams { a: 1.0, b: 1.0, beta: 1.0, gamma: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "lowercase")]
pub enum CompAlgo {
    Scga(ScgaParams),
    Ascga(ScgaParams),
    CAdam(CAdamParams),
    Nasa(NasaParams),
    /// Bias-corrected Adam steps with the tracker replaced by `ḡ(x_t)`.
    #[serde(rename = "nested-mc")]
    NestedMc(AdamParams),
}

impl CompAlgo {
    pub const NAMES: [&'static str; 5] = ["scga", "ascga", "cadam", "nasa", "nested-mc"];

    pub fn nested_mc() -> Self {
        match FirstOrderAlgo::adam() {
            FirstOrderAlgo::Adam(p) => CompAlgo::NestedMc(p),
            _ => unreachable!(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CompAlgo::Scga(_) => "scga",
            CompAlgo::Ascga(_) => "ascga",
            CompAlgo::CAdam(_) => "cadam",
            CompAlgo::Nasa(_) => "nasa",
            CompAlgo::NestedMc(_) => "nested-mc",
        }
    }

    /// Tracker rate `r_t` at 1-based step `t`.
    pub fn zeta_rate(&self, t: usize) -> f64 {
        let tf = t as f64;
        match self {
            CompAlgo::Scga(p) | CompAlgo::Ascga(p) => (p.b * tf.powf(-p.beta_d)).min(1.0),
            CompAlgo::CAdam(p) => p.beta.min(1.0),
            CompAlgo::Nasa(p) => (p.b * tf.powf(-p.gamma)).min(1.0),
            CompAlgo::NestedMc(_) => 1.0,
        }
    }
}

impl fmt::Display for CompAlgo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompAlgo {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "scga" => CompAlgo::Scga(ScgaParams::default()),
            "ascga" => CompAlgo::Ascga(ScgaParams::default()),
            "cadam" => CompAlgo::CAdam(CAdamParams::default()),
            "nasa" => CompAlgo::Nasa(NasaParams::default()),
            "nested-mc" | "nestedmc" | "nested_mc" => CompAlgo::nested_mc(),
            _ => return Err(format!("unknown compositional optimiser '{s}'")),
        })
    }
}

/// Main-variable and second-auxiliary updates, independent of how `ζ` and
/// the gradient are estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct CompUpdater {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    prod1: f64,
    prod2: f64,
    pub t: usize,
    pub algo: CompAlgo,
}

impl CompUpdater {
    pub fn new(x0: &[f64], algo: CompAlgo) -> Self {
        let mut x = x0.to_vec();
        project_unit(&mut x);
        let n = x.len();
        CompUpdater { u: x.clone(), x, m1: vec![0.0; n], m2: vec![0.0; n], prod1: 1.0, prod2: 1.0, t: 0, algo }
    }

    /// Advances `x` with the compositional gradient, sets `u_{t+1}` and
    /// returns the tracker rate to apply with `ḡ(u_{t+1})`.
    pub fn step(&mut self, grad: &[f64]) -> Result<f64, OptError> {
        if grad.len() != self.x.len() || grad.iter().any(|g| !g.is_finite()) {
            return Err(OptError::NonFiniteGradient);
        }
        self.t += 1;
        let t = self.t;
        let tf = t as f64;
        let prev = self.x.clone();
        let mut extrapolate = None;
        match self.algo {
            CompAlgo::Scga(p) | CompAlgo::Ascga(p) => {
                let eta = p.a * tf.powf(-p.lr_d);
                for (x, g) in self.x.iter_mut().zip(grad) {
                    *x += eta * g;
                }
                if matches!(self.algo, CompAlgo::Ascga(_)) {
                    extrapolate = Some(self.algo.zeta_rate(t));
                }
            }
            CompAlgo::CAdam(p) => {
                let (g1, g2, eta) = cadam_schedule(&p, t);
                for i in 0..grad.len() {
                    self.m1[i] = g1 * self.m1[i] + (1.0 - g1) * grad[i];
                    self.m2[i] = g2 * self.m2[i] + (1.0 - g2) * grad[i] * grad[i];
                    self.x[i] += eta * self.m1[i] / (self.m2[i].sqrt() + p.eps);
                }
                extrapolate = Some(p.beta);
            }
            CompAlgo::Nasa(p) => {
                let tau = tf.powf(-p.gamma);
                let rho = (p.a * tau).min(1.0);
                let eta = tau / p.beta;
                for i in 0..grad.len() {
                    self.m1[i] = (1.0 - rho) * self.m1[i] + rho * grad[i];
                    self.x[i] += eta * self.m1[i];
                }
            }
            CompAlgo::NestedMc(p) => {
                let eta = p.lr * p.decay.map_or(1.0, |d| d.powi(t as i32 - 1));
                self.prod1 *= p.beta1;
                self.prod2 *= p.beta2;
                for i in 0..grad.len() {
                    let g = grad[i] - p.weight_decay * self.x[i];
                    self.m1[i] = p.beta1 * self.m1[i] + (1.0 - p.beta1) * g;
                    self.m2[i] = p.beta2 * self.m2[i] + (1.0 - p.beta2) * g * g;
                    let mhat = self.m1[i] / (1.0 - self.prod1);
                    let vhat = self.m2[i] / (1.0 - self.prod2);
                    self.x[i] += eta * mhat / (vhat.sqrt() + p.eps);
                }
            }
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(OptError::NonFiniteState);
        }
        project_unit(&mut self.x);
        match extrapolate {
            Some(beta) => {
                let inv = 1.0 / beta;
                for i in 0..self.x.len() {
                    self.u[i] = (1.0 - inv) * prev[i] + inv * self.x[i];
                }
                project_unit(&mut self.u);
            }
            None => self.u.copy_from_slice(&self.x),
        }
        Ok(self.algo.zeta_rate(t))
    }
}

/// `(γ₁,t, γ₂,t, η_t)` for 1-based `t`.
pub fn cadam_schedule(p: &CAdamParams, t: usize) -> (f64, f64, f64) {
    let tf = t as f64;
    let (g1, g2) = match p.fixed {
        Some(g) => g,
        None => {
            let g1 = p.c_gamma * p.mu.powf(p.mu_d * tf);
            (g1, 1.0 - (1.0 - g1).powi(2) / tf.powf(p.gamma2_d))
        }
    };
    let eta = match p.fixed {
        Some(_) => p.lr,
        None => p.lr * (1.0 - g2).sqrt() / ((1.0 - g1) * tf.powf(p.alpha_d)),
    };
    (g1, g2, eta)
}

/// Where inner samples come from: a fixed pool sub-sampled with `k1`
/// (gradient) and `k2` (tracker) indices, or `k` fresh draws per use.
#[derive(Debug, Clone, Copy)]
pub enum CompSampling<'a> {
    Pool { pool: &'a SamplePool, k1: usize, k2: usize },
    Fresh { k: usize },
}

#[derive(Debug, Clone)]
pub struct CompState {
    pub upd: CompUpdater,
    pub zeta: Zeta,
    pub q: usize,
}

impl CompState {
    pub fn x(&self) -> &[f64] {
        &self.upd.x
    }
}

fn track<R: Rng + ?Sized>(
    zeta: &mut Zeta,
    spec: &AcquisitionSpec,
    model: &GpModel,
    u: &[f64],
    q: usize,
    rate: f64,
    sampling: CompSampling<'_>,
    rng: &mut R,
) -> Result<(), OptError> {
    let post = posterior(model, &batch_matrix(u, q), false)?;
    zeta.decay(1.0 - rate);
    match sampling {
        CompSampling::Pool { pool, k2, .. } => {
            let idx = minibatch_indices(pool.len(), k2, rng);
            zeta.accumulate_pool(spec, &post, pool, &idx, rate);
        }
        CompSampling::Fresh { k } => {
            let zs = ZBuffer::standard_normal(k, q, rng);
            zeta.accumulate_me(spec, &post, &zs, rate);
        }
    }
    Ok(())
}

/// `u₀ = x₀`, `ζ₀ = ḡ(x₀)`.
pub fn comp_init<R: Rng + ?Sized>(
    spec: &AcquisitionSpec,
    model: &GpModel,
    x0: &[f64],
    q: usize,
    algo: CompAlgo,
    sampling: CompSampling<'_>,
    rng: &mut R,
) -> Result<CompState, OptError> {
    let upd = CompUpdater::new(x0, algo);
    let mut zeta = match sampling {
        CompSampling::Pool { pool, .. } => Zeta::for_pool(q, pool.len()),
        CompSampling::Fresh { k } => Zeta::for_me(q, k),
    };
    track(&mut zeta, spec, model, &upd.u, q, 1.0, sampling, rng)?;
    Ok(CompState { upd, zeta, q })
}

pub fn comp_step<R: Rng + ?Sized>(
    state: &mut CompState,
    spec: &AcquisitionSpec,
    model: &GpModel,
    sampling: CompSampling<'_>,
    rng: &mut R,
) -> Result<(), OptError> {
    let xq = batch_matrix(&state.upd.x, state.q);
    let g = match sampling {
        CompSampling::Pool { pool, k1, .. } => grad_comp(spec, model, &xq, &state.zeta, pool, k1, rng)?,
        CompSampling::Fresh { .. } => grad_comp_me(spec, model, &xq, &state.zeta, rng)?,
    };
    let rate = state.upd.step(&g.g)?;
    track(&mut state.zeta, spec, model, &state.upd.u, state.q, rate, sampling, rng)
}

/// `t_steps` compositional steps per restart; the final batches are ranked
/// by the compositional acquisition on the full pool.
#[allow(clippy::too_many_arguments)]
pub fn run_comp<R: Rng + ?Sized>(
    model: &GpModel,
    spec: &AcquisitionSpec,
    pool: &SamplePool,
    restarts: &[Vec<f64>],
    q: usize,
    algo: CompAlgo,
    t_steps: usize,
    sampling: CompSampling<'_>,
    rng: &mut R,
) -> Result<OptOutcome, OptError> {
    if restarts.is_empty() {
        return Err(OptError::NoRestarts);
    }
    if !matches!(spec.form, AcqForm::Comp | AcqForm::CompMe) {
        return Err(OptError::UnsupportedForm(spec.form));
    }
    let mut rngs = restart_rngs(rng, restarts.len());
    let mut finals = Vec::with_capacity(restarts.len());
    'restart: for (x0, r) in restarts.iter().zip(rngs.iter_mut()) {
        if t_steps == 0 {
            let mut x = x0.clone();
            project_unit(&mut x);
            finals.push(x);
            continue;
        }
        let Ok(mut st) = comp_init(spec, model, x0, q, algo, sampling, r) else { continue };
        for _ in 0..t_steps {
            if comp_step(&mut st, spec, model, sampling, r).is_err() {
                continue 'restart;
            }
        }
        finals.push(st.upd.x);
    }
    let value = |x: &[f64]| {
        let post = posterior(model, &batch_matrix(x, q), false).ok()?;
        let v = acq_comp(spec, &post, pool);
        v.is_finite().then_some(v)
    };
    let (x, value) = select_best(&finals, value).ok_or(OptError::AllRestartsFailed)?;
    Ok(OptOutcome { x, value, finals })
}
