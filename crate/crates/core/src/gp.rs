//! Zero-mean Gaussian process with an ARD Matérn 5/2 kernel.
//!
//! Hyperparameters live in log space as `[log ℓ_1, …, log ℓ_d, log s², log σ²]`.
//! The batch posterior optionally carries derivatives of its mean and of its
//! Cholesky factor with respect to the flattened query batch, ordered as
//! `x[j * d + a]` for point `j` and coordinate `a`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    cho_inverse, cho_solve_vec, chol_pushforward, cholesky, dot, logdet, solve_lower,
    solve_upper_t_vec, LinalgError, Mat,
};
use crate::opt_second::{lbfgs_run, FnSource, LbfgsConfig};

const SQRT5: f64 = 2.236_067_977_499_79;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-3, 1e3);
pub const SIGNAL_BOUNDS: (f64, f64) = (1e-3, 1e3);
pub const NOISE_BOUNDS: (f64, f64) = (1e-8, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("every hyperparameter restart failed")]
    FitFailed,
    #[error("invalid data: {0}")]
    InvalidData(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(lengthscales: Vec<f64>, signal_variance: f64, noise_variance: f64) -> Self {
        KernelParams { lengthscales, signal_variance, noise_variance }
    }

    /// Initial guess used by the BO loop on standardised data.
    pub fn default_for(dim: usize) -> Self {
        KernelParams::new(vec![0.5; dim], 1.0, 1e-3)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn to_log(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_variance.ln());
        v.push(self.noise_variance.ln());
        v
    }

    pub fn from_log(v: &[f64]) -> Self {
        let d = v.len() - 2;
        KernelParams {
            lengthscales: v[..d].iter().map(|x| x.exp()).collect(),
            signal_variance: v[d].exp(),
            noise_variance: v[d + 1].exp(),
        }
    }

    /// Log-space box for the fit.
    pub fn log_bounds(dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![LENGTHSCALE_BOUNDS.0.ln(); dim];
        let mut hi = vec![LENGTHSCALE_BOUNDS.1.ln(); dim];
        lo.push(SIGNAL_BOUNDS.0.ln());
        hi.push(SIGNAL_BOUNDS.1.ln());
        lo.push(NOISE_BOUNDS.0.ln());
        hi.push(NOISE_BOUNDS.1.ln());
        (lo, hi)
    }
}

/// Gamma prior on each lengthscale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl Default for GammaPrior {
    fn default() -> Self {
        GammaPrior { shape: 3.0, rate: 6.0 }
    }
}

impl GammaPrior {
    /// Unnormalised `-log p(ℓ)` summed over lengthscales, and its gradient
    /// with respect to `log ℓ`.
    pub fn neg_log_density(&self, lengthscales: &[f64]) -> (f64, Vec<f64>) {
        let mut v = 0.0;
        let mut g = Vec::with_capacity(lengthscales.len());
        for &l in lengthscales {
            v += -(self.shape - 1.0) * l.ln() + self.rate * l;
            g.push(-(self.shape - 1.0) + self.rate * l);
        }
        (v, g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Mat,
    outputs: Vec<f64>,
    raw_outputs: Vec<f64>,
    raw_mean: f64,
    raw_std: f64,
}

impl Dataset {
    pub fn empty(dim: usize) -> Self {
        Dataset {
            inputs: Mat::zeros(0, dim),
            outputs: vec![],
            raw_outputs: vec![],
            raw_mean: 0.0,
            raw_std: 1.0,
        }
    }

    /// Builds a dataset from unit-box inputs and raw outputs, standardising
    /// the outputs.
    pub fn new(inputs: Vec<Vec<f64>>, raw_outputs: Vec<f64>) -> Result<Self, GpError> {
        let dim = inputs.first().map(|r| r.len()).unwrap_or(0);
        let mut ds = Dataset::empty(dim);
        ds.extend(inputs, raw_outputs)?;
        Ok(ds)
    }

    pub fn extend(&mut self, inputs: Vec<Vec<f64>>, raw_outputs: Vec<f64>) -> Result<(), GpError> {
        if inputs.len() != raw_outputs.len() {
            return Err(GpError::InvalidData(format!(
                "{} inputs but {} outputs",
                inputs.len(),
                raw_outputs.len()
            )));
        }
        let dim = self.dim();
        let mut data = std::mem::take(&mut self.inputs).into_vec();
        for x in &inputs {
            if x.len() != dim {
                return Err(GpError::InvalidData(format!("input of length {} in {dim}-d dataset", x.len())));
            }
            if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(GpError::InvalidData("input outside the unit box".into()));
            }
            data.extend_from_slice(x);
        }
        if raw_outputs.iter().any(|y| !y.is_finite()) {
            return Err(GpError::InvalidData("non-finite output".into()));
        }
        self.raw_outputs.extend(raw_outputs);
        let n = self.raw_outputs.len();
        self.inputs = Mat::from_vec(n, dim, data);
        let mean = self.raw_outputs.iter().sum::<f64>() / n.max(1) as f64;
        let var = self.raw_outputs.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
        let std = var.sqrt();
        self.raw_mean = mean;
        self.raw_std = if std > 0.0 && std.is_finite() { std } else { 1.0 };
        self.outputs = self.raw_outputs.iter().map(|y| (y - mean) / self.raw_std).collect();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Mat {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn raw_outputs(&self) -> &[f64] {
        &self.raw_outputs
    }

    pub fn raw_mean(&self) -> f64 {
        self.raw_mean
    }

    pub fn raw_std(&self) -> f64 {
        self.raw_std
    }

    /// Best standardised output, the EI/PI reference level.
    pub fn incumbent(&self) -> f64 {
        self.outputs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[inline]
fn scaled_r(x1: &[f64], x2: &[f64], inv_ls: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((a, b), il) in x1.iter().zip(x2).zip(inv_ls) {
        let t = (a - b) * il;
        s += t * t;
    }
    s.sqrt()
}

#[inline]
fn matern_r(r: f64, s2: f64) -> f64 {
    let sr = SQRT5 * r;
    s2 * (-sr).exp() * (1.0 + sr + 5.0 / 3.0 * r * r)
}

pub fn matern52(x1: &[f64], x2: &[f64], params: &KernelParams) -> f64 {
    assert_eq!(x1.len(), x2.len());
    let inv: Vec<f64> = params.lengthscales.iter().map(|l| 1.0 / l).collect();
    matern_r(scaled_r(x1, x2, &inv), params.signal_variance)
}

/// Writes `∂k(x1, x2)/∂x1` into `out`.
#[inline]
fn matern_grad_into(x1: &[f64], x2: &[f64], inv_ls: &[f64], s2: f64, out: &mut [f64]) {
    let r = scaled_r(x1, x2, inv_ls);
    let sr = SQRT5 * r;
    let c = s2 * (-5.0 / 3.0) * (1.0 + sr) * (-sr).exp();
    for a in 0..x1.len() {
        out[a] = c * (x1[a] - x2[a]) * inv_ls[a] * inv_ls[a];
    }
}

pub fn matern52_grad_x1(x1: &[f64], x2: &[f64], params: &KernelParams) -> Vec<f64> {
    assert_eq!(x1.len(), x2.len());
    let inv: Vec<f64> = params.lengthscales.iter().map(|l| 1.0 / l).collect();
    let mut out = vec![0.0; x1.len()];
    matern_grad_into(x1, x2, &inv, params.signal_variance, &mut out);
    out
}

fn kernel_matrix(x: &Mat, params: &KernelParams) -> Mat {
    let n = x.rows();
    let inv: Vec<f64> = params.lengthscales.iter().map(|l| 1.0 / l).collect();
    let mut k = Mat::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance;
        for j in 0..i {
            let v = matern_r(scaled_r(x.row(i), x.row(j), &inv), params.signal_variance);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn noisy_cov(ds: &Dataset, params: &KernelParams) -> Mat {
    let mut c = kernel_matrix(&ds.inputs, params);
    for i in 0..ds.len() {
        c[(i, i)] += params.noise_variance;
    }
    c
}

fn mean_diag(m: &Mat) -> f64 {
    let d = m.diag();
    if d.is_empty() {
        return 1.0;
    }
    (d.iter().sum::<f64>() / d.len() as f64).abs().max(1e-300)
}

/// Jitter scale relative to the mean diagonal.
pub const REL_JITTER: f64 = 1e-6;

/// Negative log marginal likelihood.
pub fn nlml(ds: &Dataset, params: &KernelParams) -> Result<f64, GpError> {
    let c = noisy_cov(ds, params);
    let (l, _) = cholesky(&c, REL_JITTER * mean_diag(&c))?;
    let alpha = cho_solve_vec(&l, &ds.outputs);
    let n = ds.len() as f64;
    Ok(0.5 * logdet(&l) + 0.5 * dot(&ds.outputs, &alpha) + 0.5 * n * LN_2PI)
}

/// NLML and its gradient with respect to the log-parameters.
pub fn nlml_grad(ds: &Dataset, params: &KernelParams) -> Result<(f64, Vec<f64>), GpError> {
    let n = ds.len();
    let d = ds.dim();
    let c = noisy_cov(ds, params);
    let (l, _) = cholesky(&c, REL_JITTER * mean_diag(&c))?;
    let alpha = cho_solve_vec(&l, &ds.outputs);
    let value = 0.5 * logdet(&l) + 0.5 * dot(&ds.outputs, &alpha) + 0.5 * n as f64 * LN_2PI;
    // W = C⁻¹ − ααᵀ; ∂NLML/∂p = ½ tr(W ∂C/∂p)
    let mut w = cho_inverse(&l);
    for i in 0..n {
        for j in 0..n {
            w[(i, j)] -= alpha[i] * alpha[j];
        }
    }
    let inv: Vec<f64> = params.lengthscales.iter().map(|l| 1.0 / l).collect();
    let s2 = params.signal_variance;
    let mut grad = vec![0.0; d + 2];
    let x = &ds.inputs;
    for i in 0..n {
        // diagonal: k(x,x) = s², no lengthscale dependence
        grad[d] += 0.5 * w[(i, i)] * s2;
        grad[d + 1] += 0.5 * w[(i, i)] * params.noise_variance;
        for j in 0..i {
            let r = scaled_r(x.row(i), x.row(j), &inv);
            let sr = SQRT5 * r;
            let e = (-sr).exp();
            let k = s2 * e * (1.0 + sr + 5.0 / 3.0 * r * r);
            let c = s2 * 5.0 / 3.0 * (1.0 + sr) * e;
            let wij = w[(i, j)];
            grad[d] += wij * k;
            for a in 0..d {
                let t = (x[(i, a)] - x[(j, a)]) * inv[a];
                grad[a] += wij * c * t * t;
            }
        }
    }
    Ok((value, grad))
}

/// Fitted GP: data, hyperparameters, `chol(C)` and `α = C⁻¹ y`.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub dataset: Dataset,
    pub params: KernelParams,
    pub chol_c: Mat,
    pub alpha: Vec<f64>,
    inv_ls: Vec<f64>,
}

impl GpModel {
    pub fn new(dataset: Dataset, params: KernelParams) -> Result<Self, GpError> {
        if params.dim() != dataset.dim() {
            return Err(GpError::InvalidData(format!(
                "{} lengthscales for {}-d data",
                params.dim(),
                dataset.dim()
            )));
        }
        let c = noisy_cov(&dataset, &params);
        let (chol_c, _) = cholesky(&c, REL_JITTER * mean_diag(&c))?;
        let alpha = cho_solve_vec(&chol_c, &dataset.outputs);
        let inv_ls = params.lengthscales.iter().map(|l| 1.0 / l).collect();
        Ok(GpModel { dataset, params, chol_c, alpha, inv_ls })
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }
}

/// MAP fit of the log-hyperparameters: `init` plus four perturbed restarts,
/// each run through projected L-BFGS for at most `budget` steps.
pub fn fit(ds: &Dataset, init: &KernelParams, prior: &GammaPrior, budget: usize) -> Result<GpModel, GpError> {
    if ds.is_empty() {
        return Err(GpError::InvalidData("cannot fit an empty dataset".into()));
    }
    let d = ds.dim();
    let (lo, hi) = KernelParams::log_bounds(d);
    let objective = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
        let p = KernelParams::from_log(theta);
        let (v, mut g) = nlml_grad(ds, &p).ok()?;
        let (pv, pg) = prior.neg_log_density(&p.lengthscales);
        for (gi, pgi) in g.iter_mut().zip(&pg) {
            *gi += pgi;
        }
        // ascent on the negated objective
        Some((-(v + pv), g.into_iter().map(|x| -x).collect()))
    };
    let base: Vec<f64> = init
        .to_log()
        .iter()
        .zip(lo.iter().zip(&hi))
        .map(|(v, (l, h))| v.clamp(*l, *h))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x05ee_df17);
    let mut starts = vec![base.clone()];
    for _ in 0..4 {
        let s: Vec<f64> = base
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(v, (l, h))| {
                let e: f64 = rng.sample(StandardNormal);
                (v + e).clamp(*l, *h)
            })
            .collect();
        starts.push(s);
    }
    let cfg = LbfgsConfig::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in &starts {
        let mut src = FnSource(objective);
        let out = lbfgs_run(&mut src, s, &lo, &hi, budget, &cfg);
        if out.value.is_finite() && best.as_ref().is_none_or(|(v, _)| out.value > *v) {
            best = Some((out.value, out.x));
        }
    }
    let (_, theta) = best.ok_or(GpError::FitFailed)?;
    GpModel::new(ds.clone(), KernelParams::from_log(&theta))
}

/// Batch posterior at `q` query points with optional input-derivatives.
#[derive(Debug, Clone)]
pub struct BatchPosterior {
    pub mean: Vec<f64>,
    pub cov: Mat,
    pub chol: Mat,
    pub jitter: f64,
    /// `q × dq`: `dmean[(j, c)] = ∂μ_j/∂x_c`.
    pub dmean: Option<Mat>,
    /// One `q × q` lower-triangular matrix `∂L/∂x_c` per flattened coordinate.
    pub dchol: Option<Vec<Mat>>,
}

impl BatchPosterior {
    pub fn q(&self) -> usize {
        self.mean.len()
    }

    /// Posterior with the given moments and no derivatives.
    pub fn from_moments(mean: Vec<f64>, cov: Mat) -> Result<Self, GpError> {
        let (chol, jitter) = cholesky(&cov, REL_JITTER * mean_diag(&cov))?;
        Ok(BatchPosterior { mean, cov, chol, jitter, dmean: None, dchol: None })
    }
}

pub fn posterior(model: &GpModel, xq: &Mat, with_grads: bool) -> Result<BatchPosterior, GpError> {
    let q = xq.rows();
    let d = model.dim();
    if xq.cols() != d || q == 0 {
        return Err(LinalgError::DimensionMismatch(format!(
            "query batch is {}x{}, model dimension {d}",
            q,
            xq.cols()
        ))
        .into());
    }
    let x = model.dataset.inputs();
    let n = x.rows();
    let s2 = model.params.signal_variance;
    let inv = &model.inv_ls;

    let mut kstar = Mat::zeros(n, q);
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..q {
            kstar[(i, j)] = matern_r(scaled_r(xi, xq.row(j), inv), s2);
        }
    }
    let mut cov = Mat::zeros(q, q);
    for j in 0..q {
        cov[(j, j)] = s2;
        for k in 0..j {
            let v = matern_r(scaled_r(xq.row(j), xq.row(k), inv), s2);
            cov[(j, k)] = v;
            cov[(k, j)] = v;
        }
    }
    let mut mean = vec![0.0; q];
    let mut wmat = Mat::zeros(n, q);
    if n > 0 {
        for j in 0..q {
            let mut s = 0.0;
            for i in 0..n {
                s += kstar[(i, j)] * model.alpha[i];
            }
            mean[j] = s;
        }
        let v = solve_lower(&model.chol_c, &kstar)?;
        for j in 0..q {
            for k in 0..=j {
                let mut s = 0.0;
                for i in 0..n {
                    s += v[(i, j)] * v[(i, k)];
                }
                cov[(j, k)] -= s;
                if k != j {
                    cov[(k, j)] -= s;
                }
            }
        }
        if with_grads {
            // W = C⁻¹ K*
            let mut col = vec![0.0; n];
            for j in 0..q {
                for i in 0..n {
                    col[i] = v[(i, j)];
                }
                solve_upper_t_vec(&model.chol_c, &mut col);
                for i in 0..n {
                    wmat[(i, j)] = col[i];
                }
            }
        }
    }
    let (chol, jitter) = cholesky(&cov, REL_JITTER * mean_diag(&cov))?;
    if !with_grads {
        return Ok(BatchPosterior { mean, cov, chol, jitter, dmean: None, dchol: None });
    }

    let dq = d * q;
    let mut dmean = Mat::zeros(q, dq);
    let mut dchol = Vec::with_capacity(dq);
    let mut gbuf = vec![0.0; d];
    // gk[j][i*d + a] = ∂k(xq_j, X_i)/∂xq_{j,a}
    let mut gk = vec![0.0; n * d];
    // gq[k*d + a] = ∂k(xq_j, xq_k)/∂xq_{j,a}
    let mut gq = vec![0.0; q * d];
    let mut p = vec![0.0; d * q];
    for j in 0..q {
        let xj = xq.row(j);
        for i in 0..n {
            matern_grad_into(xj, x.row(i), inv, s2, &mut gbuf);
            gk[i * d..(i + 1) * d].copy_from_slice(&gbuf);
        }
        for k in 0..q {
            if k == j {
                gq[k * d..(k + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            } else {
                matern_grad_into(xj, xq.row(k), inv, s2, &mut gbuf);
                gq[k * d..(k + 1) * d].copy_from_slice(&gbuf);
            }
        }
        // P[a][k] = Σ_i gk[i,a] W[i,k]
        p.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let wi = wmat.row(i);
            for a in 0..d {
                let g = gk[i * d + a];
                if g == 0.0 {
                    continue;
                }
                for k in 0..q {
                    p[a * q + k] += g * wi[k];
                }
            }
        }
        for a in 0..d {
            let c = j * d + a;
            let mut dm = 0.0;
            for i in 0..n {
                dm += gk[i * d + a] * model.alpha[i];
            }
            dmean[(j, c)] = dm;
            let mut ds = Mat::zeros(q, q);
            for k in 0..q {
                let v = if k == j { -2.0 * p[a * q + j] } else { gq[k * d + a] - p[a * q + k] };
                ds[(j, k)] = v;
                ds[(k, j)] = v;
            }
            dchol.push(chol_pushforward(&chol, &ds)?);
        }
    }
    Ok(BatchPosterior { mean, cov, chol, jitter, dmean: Some(dmean), dchol: Some(dchol) })
}
