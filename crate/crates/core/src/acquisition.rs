//! Reparameterised batch acquisitions (EI, PI, SR, UCB) and their ERM, FSM,
//! compositional and memory-efficient compositional forms.
//!
//! A posterior draw is `y = μ + L z`. Per kind the inner `q`-vector is
//!
//! * EI:  `ReLU(y − f⁺)`
//! * PI:  `(y − f⁺) / τ`, wrapped by the sigmoid before the max
//! * SR:  `y`
//! * UCB: `μ + √(βπ/2) |L z|`
//!
//! and an acquisition value averages `max_j wrap(v_j)` over draws.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::BatchPosterior;
use crate::linalg::Mat;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcqError {
    #[error("column index {0} out of range for {1} columns")]
    IndexOutOfRange(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcqKind {
    Ei,
    Pi,
    Sr,
    Ucb,
}

impl AcqKind {
    pub const ALL: [AcqKind; 4] = [AcqKind::Ei, AcqKind::Pi, AcqKind::Sr, AcqKind::Ucb];

    pub fn name(self) -> &'static str {
        match self {
            AcqKind::Ei => "ei",
            AcqKind::Pi => "pi",
            AcqKind::Sr => "sr",
            AcqKind::Ucb => "ucb",
        }
    }
}

impl fmt::Display for AcqKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AcqKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        AcqKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown acquisition '{s}' (expected ei, pi, sr or ucb)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcqForm {
    Erm,
    Fsm,
    Comp,
    CompMe,
}

impl AcqForm {
    pub const ALL: [AcqForm; 4] = [AcqForm::Erm, AcqForm::Fsm, AcqForm::Comp, AcqForm::CompMe];

    pub fn name(self) -> &'static str {
        match self {
            AcqForm::Erm => "erm",
            AcqForm::Fsm => "fsm",
            AcqForm::Comp => "comp",
            AcqForm::CompMe => "comp_me",
        }
    }
}

impl fmt::Display for AcqForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AcqForm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        AcqForm::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || (s.eq_ignore_ascii_case("comp-me") && *k == AcqForm::CompMe))
            .ok_or_else(|| format!("unknown form '{s}' (expected erm, fsm, comp or comp_me)"))
    }
}

pub const DEFAULT_POOL_SIZE: usize = 512;
pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSpec {
    pub kind: AcqKind,
    pub form: AcqForm,
    pub beta: f64,
    pub tau: f64,
    /// Best standardised output seen so far.
    pub incumbent: f64,
}

impl AcquisitionSpec {
    pub fn new(kind: AcqKind, form: AcqForm) -> Self {
        AcquisitionSpec { kind, form, beta: DEFAULT_BETA, tau: DEFAULT_TAU, incumbent: 0.0 }
    }

    pub fn with_incumbent(mut self, incumbent: f64) -> Self {
        self.incumbent = incumbent;
        self
    }

    /// `√(βπ/2)`, the UCB scale on `|L z|`.
    pub fn ucb_scale(&self) -> f64 {
        (self.beta * std::f64::consts::PI / 2.0).sqrt()
    }
}

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Per-thread accounting of stored reparameterisation samples, counted in
/// scalar entries of `z`.
pub mod sample_stats {
    use super::{LIVE, PEAK};

    pub fn live() -> usize {
        LIVE.with(|c| c.get())
    }

    pub fn peak() -> usize {
        PEAK.with(|c| c.get())
    }

    /// Restarts peak tracking from the current live count.
    pub fn reset_peak() {
        PEAK.with(|p| p.set(live()));
    }

    pub(super) fn add(n: usize) {
        LIVE.with(|c| {
            let v = c.get() + n;
            c.set(v);
            PEAK.with(|p| p.set(p.get().max(v)));
        });
    }

    pub(super) fn sub(n: usize) {
        LIVE.with(|c| c.set(c.get().saturating_sub(n)));
    }
}

/// Row-major `K × q` block of standard-normal draws.
#[derive(Debug)]
pub struct ZBuffer {
    data: Vec<f64>,
    q: usize,
}

impl ZBuffer {
    pub fn standard_normal<R: Rng + ?Sized>(k: usize, q: usize, rng: &mut R) -> Self {
        let data: Vec<f64> = (0..k * q).map(|_| rng.sample(StandardNormal)).collect();
        Self::from_vec(data, q)
    }

    pub fn from_vec(data: Vec<f64>, q: usize) -> Self {
        assert!(q > 0 && data.len().is_multiple_of(q), "buffer length must be a multiple of q");
        sample_stats::add(data.len());
        ZBuffer { data, q }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.q
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    #[inline]
    pub fn z(&self, i: usize) -> &[f64] {
        &self.data[i * self.q..(i + 1) * self.q]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.q)
    }
}

impl Clone for ZBuffer {
    fn clone(&self) -> Self {
        ZBuffer::from_vec(self.data.clone(), self.q)
    }
}

impl Drop for ZBuffer {
    fn drop(&mut self) {
        sample_stats::sub(self.data.len());
    }
}

/// Fixed pool of `M` draws shared by every evaluation in one maximisation.
#[derive(Debug, Clone)]
pub struct SamplePool {
    z: ZBuffer,
    seed: u64,
}

impl SamplePool {
    pub fn new(m: usize, q: usize, seed: u64) -> Self {
        assert!(m >= 1, "pool needs at least one sample");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SamplePool { z: ZBuffer::standard_normal(m, q, &mut rng), seed }
    }

    pub fn from_buffer(z: ZBuffer, seed: u64) -> Self {
        SamplePool { z, seed }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn q(&self) -> usize {
        self.z.q()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn z(&self, i: usize) -> &[f64] {
        self.z.z(i)
    }

    pub fn buffer(&self) -> &ZBuffer {
        &self.z
    }
}

/// `k` distinct indices from `0..m`, or all of `0..m` in order when `k ≥ m`.
pub fn minibatch_indices<R: Rng + ?Sized>(m: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if k >= m {
        return (0..m).collect();
    }
    index_sample(rng, m, k).into_vec()
}

#[inline]
pub fn sig(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn sig_prime(x: f64) -> f64 {
    let s = sig(x);
    s * (1.0 - s)
}

/// `L z` for lower-triangular `L`.
#[inline]
pub(crate) fn lower_mul(l: &Mat, z: &[f64], out: &mut [f64]) {
    let q = z.len();
    for j in 0..q {
        let row = &l.row(j)[..=j];
        let mut s = 0.0;
        for (a, b) in row.iter().zip(&z[..=j]) {
            s += a * b;
        }
        out[j] = s;
    }
}

/// Inner vector for one draw; `lz` receives `L z`.
#[inline]
pub(crate) fn inner_v_into(spec: &AcquisitionSpec, post: &BatchPosterior, z: &[f64], lz: &mut [f64], v: &mut [f64]) {
    lower_mul(&post.chol, z, lz);
    let f = spec.incumbent;
    match spec.kind {
        AcqKind::Ei => {
            for j in 0..v.len() {
                v[j] = (post.mean[j] + lz[j] - f).max(0.0);
            }
        }
        AcqKind::Pi => {
            let inv = 1.0 / spec.tau;
            for j in 0..v.len() {
                v[j] = (post.mean[j] + lz[j] - f) * inv;
            }
        }
        AcqKind::Sr => {
            for j in 0..v.len() {
                v[j] = post.mean[j] + lz[j];
            }
        }
        AcqKind::Ucb => {
            let c = spec.ucb_scale();
            for j in 0..v.len() {
                v[j] = post.mean[j] + c * lz[j].abs();
            }
        }
    }
}

pub fn inner_v(spec: &AcquisitionSpec, post: &BatchPosterior, z: &[f64]) -> Vec<f64> {
    let q = post.q();
    assert_eq!(z.len(), q, "draw length must equal the batch size");
    let mut lz = vec![0.0; q];
    let mut v = vec![0.0; q];
    inner_v_into(spec, post, z, &mut lz, &mut v);
    v
}

/// First index of the largest entry.
#[inline]
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..v.len() {
        if v[j] > v[best] {
            best = j;
        }
    }
    best
}

/// `max_j wrap(v_j)` with its argmax; the wrapper is the sigmoid for PI.
#[inline]
pub fn wrapped_max(kind: AcqKind, v: &[f64]) -> (usize, f64) {
    let j = argmax(v);
    let m = v[j];
    (j, if kind == AcqKind::Pi { sig(m) } else { m })
}

fn mean_over<'a>(spec: &AcquisitionSpec, post: &BatchPosterior, zs: impl Iterator<Item = &'a [f64]>) -> f64 {
    let q = post.q();
    let mut lz = vec![0.0; q];
    let mut v = vec![0.0; q];
    let mut total = 0.0;
    let mut count = 0usize;
    for z in zs {
        inner_v_into(spec, post, z, &mut lz, &mut v);
        total += wrapped_max(spec.kind, &v).1;
        count += 1;
    }
    total / count as f64
}

/// Finite-sum acquisition over the whole pool.
pub fn acq_fsm(spec: &AcquisitionSpec, post: &BatchPosterior, pool: &SamplePool) -> f64 {
    mean_over(spec, post, pool.buffer().iter())
}

/// Finite-sum acquisition over a subset of the pool.
pub fn acq_fsm_subset(spec: &AcquisitionSpec, post: &BatchPosterior, pool: &SamplePool, idx: &[usize]) -> f64 {
    mean_over(spec, post, idx.iter().map(|&i| pool.z(i)))
}

/// Outer map applied to a `q × M` estimate of `E_ω[g_ω]`.
pub fn outer_f(kind: AcqKind, a: &Mat) -> f64 {
    let (q, m) = (a.rows(), a.cols());
    let mut col = vec![0.0; q];
    let mut total = 0.0;
    for c in 0..m {
        for j in 0..q {
            col[j] = a[(j, c)];
        }
        match kind {
            AcqKind::Pi => {
                let scaled: Vec<f64> = col.iter().map(|v| sig(m as f64 * v)).collect();
                total += scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
            _ => total += col.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
    if kind == AcqKind::Pi {
        total / m as f64
    } else {
        total
    }
}

/// Outer map for the memory-efficient `q × K` inner matrix.
pub fn outer_f_me(kind: AcqKind, a: &Mat) -> f64 {
    let (q, k) = (a.rows(), a.cols());
    let mut total = 0.0;
    let mut col = vec![0.0; q];
    for c in 0..k {
        for j in 0..q {
            col[j] = a[(j, c)];
        }
        total += wrapped_max(kind, &col).1;
    }
    total / k as f64
}

/// `f(E_ω[g_ω(x)])` with the inner expectation assembled as an explicit matrix.
pub fn acq_comp(spec: &AcquisitionSpec, post: &BatchPosterior, pool: &SamplePool) -> f64 {
    let q = post.q();
    let m = pool.len();
    let mut e = Mat::zeros(q, m);
    for w in 0..m {
        let col = inner_matrix_stochastic(spec, post, w, pool).expect("index in range");
        for j in 0..q {
            e[(j, w)] += col.v[j] / m as f64;
        }
    }
    outer_f(spec.kind, &e)
}

/// One stochastic instance `g_ω`: a `q × M` matrix that is zero except for column `ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseColumn {
    pub col: usize,
    pub ncols: usize,
    pub v: Vec<f64>,
}

impl SparseColumn {
    pub fn to_dense(&self) -> Mat {
        let q = self.v.len();
        let mut m = Mat::zeros(q, self.ncols);
        for j in 0..q {
            m[(j, self.col)] = self.v[j];
        }
        m
    }
}

pub fn inner_matrix_stochastic(
    spec: &AcquisitionSpec,
    post: &BatchPosterior,
    omega: usize,
    pool: &SamplePool,
) -> Result<SparseColumn, AcqError> {
    if omega >= pool.len() {
        return Err(AcqError::IndexOutOfRange(omega, pool.len()));
    }
    Ok(SparseColumn { col: omega, ncols: pool.len(), v: inner_v(spec, post, pool.z(omega)) })
}

/// `[v_{z_1} … v_{z_K}]` for `K` fresh draws. Only `K·q` samples are ever held.
pub fn inner_matrix_me<R: Rng + ?Sized>(spec: &AcquisitionSpec, post: &BatchPosterior, k: usize, rng: &mut R) -> Mat {
    let q = post.q();
    let zs = ZBuffer::standard_normal(k, q, rng);
    let mut out = Mat::zeros(q, k);
    let mut lz = vec![0.0; q];
    let mut v = vec![0.0; q];
    for (c, z) in zs.iter().enumerate() {
        inner_v_into(spec, post, z, &mut lz, &mut v);
        for j in 0..q {
            out[(j, c)] = v[j];
        }
    }
    out
}

/// Fresh-sample estimate over `m` draws.
pub fn acq_erm_sample<R: Rng + ?Sized>(spec: &AcquisitionSpec, post: &BatchPosterior, m: usize, rng: &mut R) -> f64 {
    let zs = ZBuffer::standard_normal(m, post.q(), rng);
    mean_over(spec, post, zs.iter())
}
