//! First-order ascent `x ← δ_t x + η_t φ⁽¹⁾ / φ⁽²⁾` with eight instantiations,
//! followed by clipping to the unit box.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acq_grad::{grad_erm, grad_fsm};
use crate::acquisition::{acq_fsm, minibatch_indices, AcqForm, AcquisitionSpec, SamplePool};
use crate::gp::{posterior, GpError, GpModel};
use crate::{batch_matrix, derive_seed, project_unit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptError {
    #[error("gradient has non-finite entries")]
    NonFiniteGradient,
    #[error("optimiser state became non-finite")]
    NonFiniteState,
    #[error("every restart failed")]
    AllRestartsFailed,
    #[error("empty restart set")]
    NoRestarts,
    #[error("form {0} is not supported by this optimiser")]
    UnsupportedForm(AcqForm),
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// Multiplicative learning-rate decay per step; `None` keeps the rate constant.
pub const DEFAULT_LR_DECAY: f64 = 0.97;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgaParams {
    pub lr: f64,
    pub momentum: f64,
    pub dampening: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub decay: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaGradParams {
    pub lr: f64,
    pub lr_decay: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropParams {
    pub lr: f64,
    pub gamma: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: Option<f64>,
}

/// Shared by Adam (coupled L2 weight decay) and AdamW (decoupled `δ_t = 1 − λη_t`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaDeltaParams {
    pub lr: f64,
    pub gamma: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RPropParams {
    pub lr: f64,
    pub eta_minus: f64,
    pub eta_plus: f64,
    pub step_min: f64,
    pub step_max: f64,
}

/// Adam with `β₁,t = β₁ μ^t`, `β₂,t = 1 − (1 − β₁,t)² / t^{γ₂d}` and
/// `η_t = lr √(1 − β₂,t) / ((1 − β₁,t) t^{α_d})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamOsParams {
    pub lr: f64,
    pub beta1: f64,
    pub mu: f64,
    pub alpha_d: f64,
    pub gamma2_d: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "lowercase")]
pub enum FirstOrderAlgo {
    Sga(SgaParams),
    AdaGrad(AdaGradParams),
    RmsProp(RmsPropParams),
    Adam(AdamParams),
    AdaDelta(AdaDeltaParams),
    RProp(RPropParams),
    AdamW(AdamParams),
    AdamOs(AdamOsParams),
}

impl FirstOrderAlgo {
    pub const NAMES: [&'static str; 8] = ["sga", "adagrad", "rmsprop", "adam", "adadelta", "rprop", "adamw", "adamos"];

    pub fn sga() -> Self {
        FirstOrderAlgo::Sga(SgaParams {
            lr: 1.732e-3,
            momentum: 0.5,
            dampening: 0.5,
            nesterov: false,
            weight_decay: 3.16e-5,
            decay: Some(DEFAULT_LR_DECAY),
        })
    }

    pub fn adagrad() -> Self {
        FirstOrderAlgo::AdaGrad(AdaGradParams { lr: 1.732e-3, lr_decay: 1e-3, eps: 4.9e-5, weight_decay: 3.16e-5 })
    }

    pub fn rmsprop() -> Self {
        FirstOrderAlgo::RmsProp(RmsPropParams {
            lr: 1.732e-3,
            gamma: 0.5,
            eps: 5.5e-4,
            weight_decay: 3.16e-5,
            decay: Some(DEFAULT_LR_DECAY),
        })
    }

    pub fn adam() -> Self {
        FirstOrderAlgo::Adam(AdamParams {
            lr: 1.732e-3,
            beta1: 0.5245,
            beta2: 0.94868,
            eps: 1e-8,
            weight_decay: 3.16e-5,
            decay: Some(DEFAULT_LR_DECAY),
        })
    }

    pub fn adadelta() -> Self {
        FirstOrderAlgo::AdaDelta(AdaDeltaParams {
            lr: 1.732e-3,
            gamma: 0.5,
            eps: 1e-6,
            weight_decay: 3.16e-5,
            decay: Some(DEFAULT_LR_DECAY),
        })
    }

    pub fn rprop() -> Self {
        FirstOrderAlgo::RProp(RPropParams { lr: 1.732e-3, eta_minus: 0.5, eta_plus: 2.0, step_min: 1e-6, step_max: 50.0 })
    }

    pub fn adamw() -> Self {
        FirstOrderAlgo::AdamW(AdamParams {
            lr: 1.732e-3,
            beta1: 0.5245,
            beta2: 0.94868,
            eps: 1e-8,
            weight_decay: 3.16e-5,
            decay: Some(DEFAULT_LR_DECAY),
        })
    }

    pub fn adamos() -> Self {
        FirstOrderAlgo::AdamOs(AdamOsParams { lr: 3.16e-3, beta1: 0.9, mu: 0.99, alpha_d: 0.26, gamma2_d: 0.5, eps: 1e-8 })
    }

    pub fn name(&self) -> &'static str {
        match self {
            FirstOrderAlgo::Sga(_) => "sga",
            FirstOrderAlgo::AdaGrad(_) => "adagrad",
            FirstOrderAlgo::RmsProp(_) => "rmsprop",
            FirstOrderAlgo::Adam(_) => "adam",
            FirstOrderAlgo::AdaDelta(_) => "adadelta",
            FirstOrderAlgo::RProp(_) => "rprop",
            FirstOrderAlgo::AdamW(_) => "adamw",
            FirstOrderAlgo::AdamOs(_) => "adamos",
        }
    }

    /// Sets the base learning rate (the initial step size for RProp).
    pub fn with_lr(mut self, lr: f64) -> Self {
        match &mut self {
            FirstOrderAlgo::Sga(p) => p.lr = lr,
            FirstOrderAlgo::AdaGrad(p) => p.lr = lr,
            FirstOrderAlgo::RmsProp(p) => p.lr = lr,
            FirstOrderAlgo::Adam(p) | FirstOrderAlgo::AdamW(p) => p.lr = lr,
            FirstOrderAlgo::AdaDelta(p) => p.lr = lr,
            FirstOrderAlgo::RProp(p) => p.lr = lr,
            FirstOrderAlgo::AdamOs(p) => p.lr = lr,
        }
        self
    }
}

impl fmt::Display for FirstOrderAlgo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FirstOrderAlgo {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "sga" => Self::sga(),
            "adagrad" => Self::adagrad(),
            "rmsprop" => Self::rmsprop(),
            "adam" => Self::adam(),
            "adadelta" => Self::adadelta(),
            "rprop" => Self::rprop(),
            "adamw" => Self::adamw(),
            "adamos" => Self::adamos(),
            _ => return Err(format!("unknown first-order optimiser '{s}'")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirstOrderState {
    pub x: Vec<f64>,
    /// First-moment or momentum accumulator.
    pub m1: Vec<f64>,
    /// Squared-gradient accumulator.
    pub m2: Vec<f64>,
    /// AdaDelta's squared-update average, or RProp's per-coordinate step sizes.
    pub aux: Vec<f64>,
    /// Previous gradient (RProp sign test).
    pub prev_grad: Vec<f64>,
    /// Running products `Π β₁,k` and `Π β₂,k` used for bias correction.
    pub prod1: f64,
    pub prod2: f64,
    pub t: usize,
    pub algo: FirstOrderAlgo,
}

impl FirstOrderState {
    pub fn new(x0: &[f64], algo: FirstOrderAlgo) -> Self {
        let n = x0.len();
        let mut x = x0.to_vec();
        project_unit(&mut x);
        let aux = match algo {
            FirstOrderAlgo::RProp(p) => vec![p.lr; n],
            _ => vec![0.0; n],
        };
        FirstOrderState {
            x,
            m1: vec![0.0; n],
            m2: vec![0.0; n],
            aux,
            prev_grad: vec![0.0; n],
            prod1: 1.0,
            prod2: 1.0,
            t: 0,
            algo,
        }
    }
}

fn scheduled(lr: f64, decay: Option<f64>, t: usize) -> f64 {
    match decay {
        Some(g) => lr * g.powi(t as i32 - 1),
        None => lr,
    }
}

/// One ascent step from a gradient of the maximised objective.
pub fn general_step(state: &mut FirstOrderState, grad: &[f64]) -> Result<(), OptError> {
    if grad.len() != state.x.len() || grad.iter().any(|g| !g.is_finite()) {
        return Err(OptError::NonFiniteGradient);
    }
    state.t += 1;
    let t = state.t;
    let n = state.x.len();
    // δ_t, η_t and the elementwise ratio φ⁽¹⁾/φ⁽²⁾
    let mut delta = 1.0;
    let eta;
    let mut ratio = vec![0.0; n];
    match state.algo {
        FirstOrderAlgo::Sga(p) => {
            eta = scheduled(p.lr, p.decay, t);
            for i in 0..n {
                let g = grad[i] - p.weight_decay * state.x[i];
                ratio[i] = if p.momentum == 0.0 {
                    g
                } else {
                    state.m1[i] = if t == 1 { g } else { p.momentum * state.m1[i] + (1.0 - p.dampening) * g };
                    if p.nesterov {
                        g + p.momentum * state.m1[i]
                    } else {
                        state.m1[i]
                    }
                };
            }
        }
        FirstOrderAlgo::AdaGrad(p) => {
            eta = p.lr / (1.0 + (t - 1) as f64 * p.lr_decay);
            for i in 0..n {
                let g = grad[i] - p.weight_decay * state.x[i];
                state.m2[i] += g * g;
                ratio[i] = g / (state.m2[i] + p.eps).sqrt();
            }
        }
        FirstOrderAlgo::RmsProp(p) => {
            eta = scheduled(p.lr, p.decay, t);
            for i in 0..n {
                let g = grad[i] - p.weight_decay * state.x[i];
                state.m2[i] = p.gamma * state.m2[i] + (1.0 - p.gamma) * g * g;
                ratio[i] = g / (state.m2[i] + p.eps).sqrt();
            }
        }
        FirstOrderAlgo::Adam(p) | FirstOrderAlgo::AdamW(p) => {
            let decoupled = matches!(state.algo, FirstOrderAlgo::AdamW(_));
            eta = scheduled(p.lr, p.decay, t);
            if decoupled {
                delta = 1.0 - p.weight_decay * eta;
            }
            state.prod1 *= p.beta1;
            state.prod2 *= p.beta2;
            for i in 0..n {
                let g = if decoupled { grad[i] } else { grad[i] - p.weight_decay * state.x[i] };
                state.m1[i] = p.beta1 * state.m1[i] + (1.0 - p.beta1) * g;
                state.m2[i] = p.beta2 * state.m2[i] + (1.0 - p.beta2) * g * g;
                let mhat = state.m1[i] / (1.0 - state.prod1);
                let vhat = state.m2[i] / (1.0 - state.prod2);
                ratio[i] = mhat / (vhat.sqrt() + p.eps);
            }
        }
        FirstOrderAlgo::AdaDelta(p) => {
            eta = scheduled(p.lr, p.decay, t);
            for i in 0..n {
                let g = grad[i] - p.weight_decay * state.x[i];
                state.m2[i] = p.gamma * state.m2[i] + (1.0 - p.gamma) * g * g;
                let step = g * (state.aux[i] + p.eps).sqrt() / (state.m2[i] + p.eps).sqrt();
                state.aux[i] = p.gamma * state.aux[i] + (1.0 - p.gamma) * step * step;
                ratio[i] = step;
            }
        }
        FirstOrderAlgo::RProp(p) => {
            eta = 1.0;
            for i in 0..n {
                let mut g = grad[i];
                let s = g * state.prev_grad[i];
                if s > 0.0 {
                    state.aux[i] = (state.aux[i] * p.eta_plus).min(p.step_max);
                } else if s < 0.0 {
                    state.aux[i] = (state.aux[i] * p.eta_minus).max(p.step_min);
                    g = 0.0;
                }
                state.prev_grad[i] = g;
                ratio[i] = sign(g) * state.aux[i];
            }
        }
        FirstOrderAlgo::AdamOs(p) => {
            let tf = t as f64;
            let b1 = p.beta1 * p.mu.powi(t as i32);
            let b2 = 1.0 - (1.0 - b1).powi(2) / tf.powf(p.gamma2_d);
            eta = p.lr * (1.0 - b2).sqrt() / ((1.0 - b1) * tf.powf(p.alpha_d));
            state.prod1 *= b1;
            state.prod2 *= b2;
            for i in 0..n {
                let g = grad[i];
                state.m1[i] = b1 * state.m1[i] + (1.0 - b1) * g;
                state.m2[i] = b2 * state.m2[i] + (1.0 - b2) * g * g;
                let mhat = state.m1[i] / (1.0 - state.prod1);
                let vhat = state.m2[i] / (1.0 - state.prod2);
                ratio[i] = mhat / (vhat.sqrt() + p.eps);
            }
        }
    }
    for i in 0..n {
        state.x[i] = delta * state.x[i] + eta * ratio[i];
    }
    if state.x.iter().any(|v| !v.is_finite()) {
        return Err(OptError::NonFiniteState);
    }
    project_unit(&mut state.x);
    Ok(())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of maximising an acquisition over a restart set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    /// Final iterate of every surviving restart.
    pub finals: Vec<Vec<f64>>,
}

/// Finite-sum acquisition of a flat batch on the whole pool.
pub fn fsm_value(spec: &AcquisitionSpec, model: &GpModel, pool: &SamplePool, x: &[f64], q: usize) -> Option<f64> {
    let post = posterior(model, &batch_matrix(x, q), false).ok()?;
    let v = acq_fsm(spec, &post, pool);
    v.is_finite().then_some(v)
}

/// Highest-valued candidate under `value`; first wins ties.
pub fn select_best<F: FnMut(&[f64]) -> Option<f64>>(candidates: &[Vec<f64>], mut value: F) -> Option<(Vec<f64>, f64)> {
    let mut best: Option<(Vec<f64>, f64)> = None;
    for c in candidates {
        if let Some(v) = value(c) {
            if best.as_ref().is_none_or(|(_, b)| v > *b) {
                best = Some((c.clone(), v));
            }
        }
    }
    best
}

/// Per-restart generator derived from one draw of `rng`.
pub(crate) fn restart_rngs<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<ChaCha8Rng> {
    let base: u64 = rng.gen();
    (0..n).map(|r| ChaCha8Rng::seed_from_u64(derive_seed(&[base, r as u64]))).collect()
}

/// `t_steps` ascent steps per restart on the FSM (pool minibatch) or ERM
/// (fresh draws) gradient; returns the restart whose final batch scores best
/// on the full pool.
#[allow(clippy::too_many_arguments)]
pub fn run_first_order<R: Rng + ?Sized>(
    model: &GpModel,
    spec: &AcquisitionSpec,
    pool: &SamplePool,
    restarts: &[Vec<f64>],
    q: usize,
    algo: FirstOrderAlgo,
    t_steps: usize,
    minibatch: usize,
    rng: &mut R,
) -> Result<OptOutcome, OptError> {
    if restarts.is_empty() {
        return Err(OptError::NoRestarts);
    }
    if !matches!(spec.form, AcqForm::Fsm | AcqForm::Erm) {
        return Err(OptError::UnsupportedForm(spec.form));
    }
    let mut rngs = restart_rngs(rng, restarts.len());
    let mut finals = Vec::with_capacity(restarts.len());
    'restart: for (x0, r) in restarts.iter().zip(rngs.iter_mut()) {
        let mut st = FirstOrderState::new(x0, algo);
        for _ in 0..t_steps {
            let xq = batch_matrix(&st.x, q);
            let g = match spec.form {
                AcqForm::Fsm => {
                    let idx = minibatch_indices(pool.len(), minibatch, r);
                    let zs: Vec<&[f64]> = idx.iter().map(|&i| pool.z(i)).collect();
                    grad_fsm(spec, model, &xq, &zs)
                }
                _ => grad_erm(spec, model, &xq, minibatch, r),
            };
            let Ok(g) = g else { continue 'restart };
            if general_step(&mut st, &g.g).is_err() {
                continue 'restart;
            }
        }
        finals.push(st.x);
    }
    let (x, value) = select_best(&finals, |x| fsm_value(spec, model, pool, x, q)).ok_or(OptError::AllRestartsFailed)?;
    Ok(OptOutcome { x, value, finals })
}
