//! Limited-memory BFGS ascent with box projection and a backtracking
//! Armijo line search, plus its compositional variant.
//!
//! Gradients handed to this module are gradients of a maximised objective.
//! Curvature pairs store `h = g_old − g_new`, the gradient difference of the
//! negated objective, so the usual `hᵀs > 0` gate applies.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acq_grad::{grad_comp_at, outer_value, Zeta};
use crate::acquisition::{minibatch_indices, AcquisitionSpec, SamplePool};
use crate::gp::{posterior, GpModel};
use crate::linalg::dot;
use crate::project_unit;

pub const CURVATURE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePair {
    pub s: Vec<f64>,
    pub h: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone)]
pub struct LbfgsState {
    pub x: Vec<f64>,
    pub pairs: VecDeque<CurvaturePair>,
    pub prev_grad: Vec<f64>,
    pub t: usize,
    pub history: usize,
}

impl LbfgsState {
    pub fn new(x: Vec<f64>, history: usize) -> Self {
        let n = x.len();
        LbfgsState { x, pairs: VecDeque::new(), prev_grad: vec![0.0; n], t: 0, history }
    }

    /// Stores `(s, h)` if it passes the curvature gate. Returns whether it was kept.
    pub fn push_pair(&mut self, s: Vec<f64>, h: Vec<f64>) -> bool {
        let hs = dot(&h, &s);
        if !(hs > CURVATURE_EPS) || !hs.is_finite() {
            return false;
        }
        if self.history == 0 {
            return false;
        }
        if self.pairs.len() == self.history {
            self.pairs.pop_front();
        }
        self.pairs.push_back(CurvaturePair { s, h, rho: 1.0 / hs });
        true
    }
}

/// Two-loop evaluation of `A_t · grad`.
pub fn lbfgs_direction(state: &LbfgsState, grad: &[f64]) -> Vec<f64> {
    let mut r = grad.to_vec();
    let k = state.pairs.len();
    if k == 0 {
        return r;
    }
    let mut alphas = vec![0.0; k];
    for (i, p) in state.pairs.iter().enumerate().rev() {
        let a = p.rho * dot(&p.s, &r);
        alphas[i] = a;
        for (rv, hv) in r.iter_mut().zip(&p.h) {
            *rv -= a * hv;
        }
    }
    let last = state.pairs.back().unwrap();
    let gamma = dot(&last.s, &last.h) / dot(&last.h, &last.h);
    for v in r.iter_mut() {
        *v *= gamma;
    }
    for (i, p) in state.pairs.iter().enumerate() {
        let b = p.rho * dot(&p.h, &r);
        let c = alphas[i] - b;
        for (rv, sv) in r.iter_mut().zip(&p.s) {
            *rv += c * sv;
        }
    }
    r
}

/// Objective and gradient oracle for [`lbfgs_run`]. `None` marks a failed
/// evaluation, which the line search treats as a rejected trial.
pub trait GradSource {
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        self.value_grad(x).map(|(v, _)| v)
    }
    fn value_grad(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)>;
}

/// Adapts a closure returning `(value, gradient)`.
pub struct FnSource<F>(pub F);

impl<F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>> GradSource for FnSource<F> {
    fn value_grad(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        (self.0)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub history: usize,
    pub armijo_c: f64,
    pub max_halvings: usize,
    pub initial_step: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig { history: 10, armijo_c: 1e-4, max_halvings: 20, initial_step: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    ZeroGradient,
    LineSearchFailed,
    StartFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub steps: usize,
    pub stop: StopReason,
    /// Accepted iterates, starting with the projected `x0`.
    pub iterates: Vec<Vec<f64>>,
    /// Objective values at the accepted iterates.
    pub values: Vec<f64>,
}

fn clip(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Projected L-BFGS ascent inside the box `[lo, hi]`.
pub fn lbfgs_run<S: GradSource>(
    source: &mut S,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    t_steps: usize,
    cfg: &LbfgsConfig,
) -> LbfgsOutcome {
    let mut x = x0.to_vec();
    clip(&mut x, lo, hi);
    let Some((mut f, mut g)) = source.value_grad(&x).filter(|(v, g)| {
        v.is_finite() && g.iter().all(|e| e.is_finite())
    }) else {
        return LbfgsOutcome {
            x,
            value: f64::NEG_INFINITY,
            steps: 0,
            stop: StopReason::StartFailed,
            iterates: vec![],
            values: vec![],
        };
    };
    let mut state = LbfgsState::new(x.clone(), cfg.history);
    let mut iterates = vec![x.clone()];
    let mut values = vec![f];
    let mut stop = StopReason::Budget;
    let mut steps = 0;
    while steps < t_steps {
        if g.iter().all(|v| *v == 0.0) {
            stop = StopReason::ZeroGradient;
            break;
        }
        let mut dir = lbfgs_direction(&state, &g);
        let mut eta = cfg.initial_step;
        if state.pairs.is_empty() {
            let gn = dot(&g, &g).sqrt();
            eta = eta.min(1.0 / gn.max(f64::MIN_POSITIVE));
        }
        if !(dot(&dir, &g) > 0.0) {
            dir = g.clone();
        }
        let mut accepted = None;
        let mut trial = vec![0.0; x.len()];
        for _ in 0..=cfg.max_halvings {
            for i in 0..x.len() {
                trial[i] = x[i] + eta * dir[i];
            }
            clip(&mut trial, lo, hi);
            let gain: f64 = g.iter().zip(trial.iter().zip(&x)).map(|(gi, (t, xi))| gi * (t - xi)).sum();
            if gain > 0.0 {
                if let Some(ft) = source.value(&trial) {
                    if ft.is_finite() && ft >= f + cfg.armijo_c * gain {
                        accepted = Some(ft);
                        break;
                    }
                }
            }
            eta *= 0.5;
        }
        if accepted.is_none() {
            stop = StopReason::LineSearchFailed;
            break;
        }
        let Some((fn_, gn)) = source.value_grad(&trial).filter(|(v, g)| {
            v.is_finite() && g.iter().all(|e| e.is_finite())
        }) else {
            stop = StopReason::LineSearchFailed;
            break;
        };
        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let h: Vec<f64> = g.iter().zip(&gn).map(|(a, b)| a - b).collect();
        state.push_pair(s, h);
        x.copy_from_slice(&trial);
        f = fn_;
        g = gn;
        state.x.copy_from_slice(&x);
        state.prev_grad.copy_from_slice(&g);
        state.t += 1;
        steps += 1;
        iterates.push(x.clone());
        values.push(f);
    }
    LbfgsOutcome { x, value: f, steps, stop, iterates, values }
}

/// Fixed-minibatch compositional objective: value `f(ḡ_{K2}(x))` and
/// gradient `J_{K1}(x)ᵀ ∇f(ζ)` with `ζ = ḡ_{K2}(x)` refreshed at every call.
pub struct CompSource<'a> {
    pub model: &'a GpModel,
    pub spec: &'a AcquisitionSpec,
    pub pool: &'a SamplePool,
    pub grad_idx: Vec<usize>,
    pub zeta_idx: Vec<usize>,
    pub q: usize,
}

impl CompSource<'_> {
    fn zeta_at(&self, x: &[f64]) -> Option<Zeta> {
        let post = posterior(self.model, &crate::batch_matrix(x, self.q), false).ok()?;
        let mut zeta = Zeta::for_pool(self.q, self.pool.len());
        zeta.accumulate_pool(self.spec, &post, self.pool, &self.zeta_idx, 1.0);
        Some(zeta)
    }
}

impl GradSource for CompSource<'_> {
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        let zeta = self.zeta_at(x)?;
        Some(outer_value(self.spec.kind, &zeta))
    }

    fn value_grad(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let zeta = self.zeta_at(x)?;
        let value = outer_value(self.spec.kind, &zeta);
        let xq = crate::batch_matrix(x, self.q);
        let pairs: Vec<(usize, &[f64])> =
            self.grad_idx.iter().map(|&w| (w, self.pool.z(w))).collect();
        let g = grad_comp_at(self.spec, self.model, &xq, &zeta, &pairs).ok()?;
        Some((value, g.g))
    }
}

/// CL-BFGS from `x0` over `[0,1]^{dq}`. The minibatch indices are drawn
/// once from `rng` and held fixed for the whole run.
#[allow(clippy::too_many_arguments)]
pub fn clbfgs_run<R: Rng + ?Sized>(
    spec: &AcquisitionSpec,
    model: &GpModel,
    pool: &SamplePool,
    x0: &[f64],
    q: usize,
    t_steps: usize,
    k1: usize,
    k2: usize,
    rng: &mut R,
    cfg: &LbfgsConfig,
) -> LbfgsOutcome {
    let grad_idx = minibatch_indices(pool.len(), k1, rng);
    let zeta_idx = minibatch_indices(pool.len(), k2, rng);
    let mut src = CompSource { model, spec, pool, grad_idx, zeta_idx, q };
    let n = x0.len();
    let mut out = lbfgs_run(&mut src, x0, &vec![0.0; n], &vec![1.0; n], t_steps, cfg);
    project_unit(&mut out.x);
    out
}
