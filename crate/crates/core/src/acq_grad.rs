//! Analytic gradients of the batch acquisitions with respect to the flattened
//! batch `x[j*d + a]`, and the compositional gradient estimate built around
//! an auxiliary tracker `ζ` of the inner expectation.

use rand::Rng;

use crate::acquisition::{
    argmax, inner_v_into, minibatch_indices, sig, sig_prime, AcqKind, AcquisitionSpec, SamplePool, ZBuffer,
};
use crate::gp::{posterior, BatchPosterior, GpError, GpModel};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct AcqGradient {
    pub g: Vec<f64>,
    pub value: f64,
}

/// Dense `q × ncols` estimate of `E_ω[g_ω]` stored column-contiguously with
/// a lazy global scale, so an exponential decay costs O(1).
#[derive(Debug, Clone)]
pub struct Zeta {
    q: usize,
    ncols: usize,
    data: Vec<f64>,
    scale: f64,
    col_scale: f64,
}

const RESCALE_BELOW: f64 = 1e-150;

impl Zeta {
    /// Tracker for the pooled form: `M` columns, each holding `v_ω / M`.
    pub fn for_pool(q: usize, m: usize) -> Self {
        Zeta { q, ncols: m, data: vec![0.0; q * m], scale: 1.0, col_scale: m as f64 }
    }

    /// Tracker for the memory-efficient form: `K` columns of raw inner vectors.
    pub fn for_me(q: usize, k: usize) -> Self {
        Zeta { q, ncols: k, data: vec![0.0; q * k], scale: 1.0, col_scale: 1.0 }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Factor that turns a stored column into an inner vector (`M` or 1).
    pub fn col_scale(&self) -> f64 {
        self.col_scale
    }

    #[inline]
    pub fn get(&self, j: usize, m: usize) -> f64 {
        self.data[m * self.q + j] * self.scale
    }

    pub fn column(&self, m: usize) -> Vec<f64> {
        self.data[m * self.q..(m + 1) * self.q].iter().map(|v| v * self.scale).collect()
    }

    /// `ζ ← keep · ζ`.
    pub fn decay(&mut self, keep: f64) {
        if keep == 0.0 {
            self.clear();
            return;
        }
        self.scale *= keep;
        if self.scale.abs() < RESCALE_BELOW {
            let s = self.scale;
            self.data.iter_mut().for_each(|v| *v *= s);
            self.scale = 1.0;
        }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
        self.scale = 1.0;
    }

    /// `ζ[:, m] += w · v`.
    #[inline]
    pub fn add_column(&mut self, m: usize, v: &[f64], w: f64) {
        let f = w / self.scale;
        for (d, x) in self.data[m * self.q..(m + 1) * self.q].iter_mut().zip(v) {
            *d += f * x;
        }
    }

    /// Adds `weight · ḡ` with `ḡ = (1/|idx|) Σ_{ω∈idx} g_ω` built from pool draws.
    pub fn accumulate_pool(&mut self, spec: &AcquisitionSpec, post: &BatchPosterior, pool: &SamplePool, idx: &[usize], weight: f64) {
        assert_eq!(self.ncols, pool.len(), "tracker width must equal the pool size");
        let q = self.q;
        let mut lz = vec![0.0; q];
        let mut v = vec![0.0; q];
        let w = weight / idx.len() as f64;
        for &o in idx {
            inner_v_into(spec, post, pool.z(o), &mut lz, &mut v);
            self.add_column(o, &v, w);
        }
    }

    /// Adds `weight · v_{z_i}` to column `i` for each fresh draw.
    pub fn accumulate_me(&mut self, spec: &AcquisitionSpec, post: &BatchPosterior, zs: &ZBuffer, weight: f64) {
        assert_eq!(self.ncols, zs.len(), "tracker width must equal the number of draws");
        let q = self.q;
        let mut lz = vec![0.0; q];
        let mut v = vec![0.0; q];
        for (i, z) in zs.iter().enumerate() {
            inner_v_into(spec, post, z, &mut lz, &mut v);
            self.add_column(i, &v, weight);
        }
    }

    /// Argmax row of column `m` and the wrapped-argument value `col_scale · ζ_{j*,m}`.
    #[inline]
    pub fn column_argmax(&self, m: usize) -> (usize, f64) {
        let col = &self.data[m * self.q..(m + 1) * self.q];
        let j = if self.scale > 0.0 { argmax(col) } else { argmin(col) };
        (j, col[j] * self.scale * self.col_scale)
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_fn(self.q, self.ncols, |j, m| self.get(j, m))
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..v.len() {
        if v[j] < v[best] {
            best = j;
        }
    }
    best
}

/// Outer value `f(ζ) = (1/ncols) Σ_m wrap(col_scale · max_j ζ_{jm})`.
pub fn outer_value(kind: AcqKind, zeta: &Zeta) -> f64 {
    let mut total = 0.0;
    for m in 0..zeta.ncols {
        let (_, a) = zeta.column_argmax(m);
        total += if kind == AcqKind::Pi { sig(a) } else { a };
    }
    total / zeta.ncols as f64
}

/// Auxiliary state of the compositional optimisers.
#[derive(Debug, Clone)]
pub struct CompGradientCtx {
    pub zeta: Zeta,
    pub u: Vec<f64>,
}

/// Running sums `a_j` (coefficient on `∂μ_j`) and `B_{jk}` (on `∂L_{jk}`).
struct Accum {
    a: Vec<f64>,
    b: Mat,
}

impl Accum {
    fn new(q: usize) -> Self {
        Accum { a: vec![0.0; q], b: Mat::zeros(q, q) }
    }

    /// Adds `w · ∂v_j(z)/∂(μ, L)` for batch element `j`.
    #[inline]
    fn add(&mut self, spec: &AcquisitionSpec, j: usize, z: &[f64], lz_j: f64, v_j: f64, w: f64) {
        let (wm, wl) = match spec.kind {
            AcqKind::Ei => {
                if v_j > 0.0 {
                    (w, w)
                } else {
                    return;
                }
            }
            AcqKind::Pi => (w / spec.tau, w / spec.tau),
            AcqKind::Sr => (w, w),
            AcqKind::Ucb => {
                let s = if lz_j > 0.0 {
                    1.0
                } else if lz_j < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (w, w * spec.ucb_scale() * s)
            }
        };
        self.a[j] += wm;
        if wl != 0.0 {
            let row = self.b.row_mut(j);
            for k in 0..=j {
                row[k] += wl * z[k];
            }
        }
    }

    fn contract(&self, post: &BatchPosterior) -> Result<Vec<f64>, GpError> {
        let (dmean, dchol) = match (&post.dmean, &post.dchol) {
            (Some(m), Some(c)) => (m, c),
            _ => return Err(GpError::InvalidData("posterior was computed without derivatives".into())),
        };
        let q = post.q();
        let mut g = vec![0.0; dchol.len()];
        for (c, gc) in g.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..q {
                s += self.a[j] * dmean[(j, c)];
                let brow = self.b.row(j);
                let lrow = dchol[c].row(j);
                for k in 0..=j {
                    s += brow[k] * lrow[k];
                }
            }
            *gc = s;
        }
        Ok(g)
    }
}

/// Mean sub-gradient of `max_j wrap(v_j(z))` over the given draws.
pub fn grad_from_posterior<'a>(
    spec: &AcquisitionSpec,
    post: &BatchPosterior,
    zs: impl IntoIterator<Item = &'a [f64]>,
) -> Result<AcqGradient, GpError> {
    let q = post.q();
    let mut lz = vec![0.0; q];
    let mut v = vec![0.0; q];
    let mut acc = Accum::new(q);
    let mut value = 0.0;
    let mut count = 0usize;
    let mut items = Vec::new();
    for z in zs {
        inner_v_into(spec, post, z, &mut lz, &mut v);
        let j = argmax(&v);
        let w = if spec.kind == AcqKind::Pi {
            value += sig(v[j]);
            sig_prime(v[j])
        } else {
            value += v[j];
            1.0
        };
        items.push((z, j, lz[j], v[j], w));
        count += 1;
    }
    let inv = 1.0 / count as f64;
    for (z, j, lzj, vj, w) in items {
        acc.add(spec, j, z, lzj, vj, w * inv);
    }
    Ok(AcqGradient { g: acc.contract(post)?, value: value * inv })
}

/// Gradient of the finite-sum acquisition over the given pool draws.
pub fn grad_fsm(spec: &AcquisitionSpec, model: &GpModel, xq: &Mat, zs: &[&[f64]]) -> Result<AcqGradient, GpError> {
    let post = posterior(model, xq, true)?;
    grad_from_posterior(spec, &post, zs.iter().copied())
}

/// Gradient of the finite-sum acquisition over a whole pool.
pub fn grad_fsm_pool(spec: &AcquisitionSpec, model: &GpModel, xq: &Mat, pool: &SamplePool) -> Result<AcqGradient, GpError> {
    let post = posterior(model, xq, true)?;
    grad_from_posterior(spec, &post, pool.buffer().iter())
}

/// Same chain rule as [`grad_fsm`] over `minibatch` fresh draws.
pub fn grad_erm<R: Rng + ?Sized>(
    spec: &AcquisitionSpec,
    model: &GpModel,
    xq: &Mat,
    minibatch: usize,
    rng: &mut R,
) -> Result<AcqGradient, GpError> {
    let post = posterior(model, xq, true)?;
    let zs = ZBuffer::standard_normal(minibatch, post.q(), rng);
    grad_from_posterior(spec, &post, zs.iter())
}

/// `(1/|pairs|) Σ_i ∇_ζ f · ∂g_{ω_i}/∂x` with the outer derivative taken at `ζ`.
/// Each pair is a `ζ` column index with the draw that generates that column.
pub fn comp_grad_from_posterior(
    spec: &AcquisitionSpec,
    post: &BatchPosterior,
    zeta: &Zeta,
    pairs: &[(usize, &[f64])],
) -> Result<AcqGradient, GpError> {
    let q = post.q();
    if zeta.q() != q {
        return Err(crate::linalg::LinalgError::DimensionMismatch(format!(
            "tracker has {} rows, batch has {q} points",
            zeta.q()
        ))
        .into());
    }
    let mut lz = vec![0.0; q];
    let mut v = vec![0.0; q];
    let mut acc = Accum::new(q);
    let inv = 1.0 / pairs.len() as f64;
    for &(m, z) in pairs {
        if m >= zeta.ncols() {
            return Err(crate::linalg::LinalgError::DimensionMismatch(format!(
                "column {m} outside tracker of width {}",
                zeta.ncols()
            ))
            .into());
        }
        inner_v_into(spec, post, z, &mut lz, &mut v);
        let (j, a) = zeta.column_argmax(m);
        let w = if spec.kind == AcqKind::Pi { sig_prime(a) } else { 1.0 };
        acc.add(spec, j, z, lz[j], v[j], w * inv);
    }
    Ok(AcqGradient { g: acc.contract(post)?, value: outer_value(spec.kind, zeta) })
}

pub fn grad_comp_at(
    spec: &AcquisitionSpec,
    model: &GpModel,
    xq: &Mat,
    zeta: &Zeta,
    pairs: &[(usize, &[f64])],
) -> Result<AcqGradient, GpError> {
    let post = posterior(model, xq, true)?;
    comp_grad_from_posterior(spec, &post, zeta, pairs)
}

/// Compositional gradient with `k1` pool indices sampled without replacement.
pub fn grad_comp<R: Rng + ?Sized>(
    spec: &AcquisitionSpec,
    model: &GpModel,
    xq: &Mat,
    zeta: &Zeta,
    pool: &SamplePool,
    k1: usize,
    rng: &mut R,
) -> Result<AcqGradient, GpError> {
    let idx = minibatch_indices(pool.len(), k1, rng);
    let pairs: Vec<(usize, &[f64])> = idx.iter().map(|&w| (w, pool.z(w))).collect();
    grad_comp_at(spec, model, xq, zeta, &pairs)
}

/// Memory-efficient compositional gradient: one fresh draw per tracker column.
/// The draws are released before returning.
pub fn grad_comp_me<R: Rng + ?Sized>(
    spec: &AcquisitionSpec,
    model: &GpModel,
    xq: &Mat,
    zeta: &Zeta,
    rng: &mut R,
) -> Result<AcqGradient, GpError> {
    let zs = ZBuffer::standard_normal(zeta.ncols(), xq.rows(), rng);
    let pairs: Vec<(usize, &[f64])> = zs.iter().enumerate().collect();
    grad_comp_at(spec, model, xq, zeta, &pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{acq_fsm, AcqForm};
    use crate::gp::{Dataset, KernelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(n: usize, d: usize, ls: f64, rng: &mut ChaCha8Rng) -> GpModel {
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen::<f64>()).collect()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.iter().map(|v| (3.0 * v).sin()).sum::<f64>()).collect();
        let ds = Dataset::new(xs, ys).unwrap();
        GpModel::new(ds, KernelParams::new(vec![ls; d], 1.0, 1e-4)).unwrap()
    }

    fn rand_batch(q: usize, d: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(q, d, |_, _| rng.gen_range(0.05..0.95))
    }

    fn fsm_value(spec: &AcquisitionSpec, m: &GpModel, xq: &Mat, pool: &SamplePool) -> f64 {
        acq_fsm(spec, &posterior(m, xq, false).unwrap(), pool)
    }

    fn central_fd(spec: &AcquisitionSpec, m: &GpModel, xq: &Mat, pool: &SamplePool, h: f64) -> Vec<f64> {
        let (q, d) = (xq.rows(), xq.cols());
        (0..q * d)
            .map(|c| {
                let mut p = xq.clone();
                let mut n = xq.clone();
                p[(c / d, c % d)] += h;
                n[(c / d, c % d)] -= h;
                (fsm_value(spec, m, &p, pool) - fsm_value(spec, m, &n, pool)) / (2.0 * h)
            })
            .collect()
    }

    /// True when every draw is at least `gap` away from an argmax tie and from
    /// the ReLU and `|·|` kinks.
    fn generic(spec: &AcquisitionSpec, post: &BatchPosterior, pool: &SamplePool, gap: f64) -> bool {
        let q = post.q();
        let mut lz = vec![0.0; q];
        let mut v = vec![0.0; q];
        for z in pool.buffer().iter() {
            inner_v_into(spec, post, z, &mut lz, &mut v);
            let j = argmax(&v);
            if (0..q).any(|k| k != j && v[j] - v[k] < gap) {
                return false;
            }
            for k in 0..q {
                let y = post.mean[k] + lz[k] - spec.incumbent;
                if spec.kind == AcqKind::Ei && y.abs() < gap {
                    return false;
                }
                if spec.kind == AcqKind::Ucb && lz[k].abs() < gap {
                    return false;
                }
            }
        }
        true
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let den = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-6);
        num / den
    }

    #[test]
    fn fd_agreement_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut checked = 0;
        for trial in 0..40 {
            let q = 1 + trial % 4;
            let d = 1 + (trial * 3) % 8;
            let n = 3 + (trial * 7) % 18;
            let m = model(n, d, 0.4, &mut rng);
            let kind = AcqKind::ALL[trial % 4];
            let mut spec = AcquisitionSpec::new(kind, AcqForm::Fsm).with_incumbent(m.dataset.incumbent());
            if kind == AcqKind::Pi {
                spec.tau = 0.5;
            }
            let pool = SamplePool::new(16, q, trial as u64);
            let xq = rand_batch(q, d, &mut rng);
            let post = posterior(&m, &xq, true).unwrap();
            if !generic(&spec, &post, &pool, 1e-3) {
                continue;
            }
            let g = grad_fsm_pool(&spec, &m, &xq, &pool).unwrap();
            let fd = central_fd(&spec, &m, &xq, &pool, 1e-5);
            let e = rel_err(&g.g, &fd);
            assert!(e <= 1e-4, "{kind:?} q={q} d={d}: rel err {e}");
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} generic points");
    }

    #[test]
    fn sr_scalar_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = model(3, 1, 0.3, &mut rng);
        let spec = AcquisitionSpec::new(AcqKind::Sr, AcqForm::Fsm);
        let pool = SamplePool::new(64, 1, 3);
        for i in 0..10 {
            let xq = Mat::from_vec(1, 1, vec![0.043 + 0.0917 * i as f64]);
            let g = grad_fsm_pool(&spec, &m, &xq, &pool).unwrap();
            let fd = central_fd(&spec, &m, &xq, &pool, 1e-5);
            assert!((g.g[0] - fd[0]).abs() <= 1e-4 * fd[0].abs().max(1e-3), "{} vs {}", g.g[0], fd[0]);
        }
    }

    #[test]
    fn flat_posterior_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // constant outputs and a huge lengthscale: the posterior barely depends on x
        let xs: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let ds = Dataset::new(xs, vec![2.0; 5]).unwrap();
        let m = GpModel::new(ds, KernelParams::new(vec![1e3; 2], 0.1, 1.0)).unwrap();
        let pool = SamplePool::new(32, 1, 0);
        for kind in AcqKind::ALL {
            let spec = AcquisitionSpec::new(kind, AcqForm::Fsm).with_incumbent(-5.0);
            let g = grad_fsm_pool(&spec, &m, &rand_batch(1, 2, &mut rng), &pool).unwrap();
            let norm = g.g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 1e-6, "{kind:?}: {norm}");
        }
    }

    #[test]
    fn ei_dead_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = model(6, 2, 0.5, &mut rng);
        let spec = AcquisitionSpec::new(AcqKind::Ei, AcqForm::Fsm).with_incumbent(100.0);
        let pool = SamplePool::new(32, 3, 0);
        let g = grad_fsm_pool(&spec, &m, &rand_batch(3, 2, &mut rng), &pool).unwrap();
        assert!(g.g.iter().all(|&v| v == 0.0));
        assert_eq!(g.value, 0.0);
    }

    #[test]
    fn comp_with_exact_zeta_equals_fsm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = model(8, 3, 0.5, &mut rng);
        let q = 3;
        let pool = SamplePool::new(40, q, 2);
        for kind in AcqKind::ALL {
            let spec = AcquisitionSpec::new(kind, AcqForm::Comp).with_incumbent(m.dataset.incumbent() - 0.5);
            let xq = rand_batch(q, 3, &mut rng);
            let post = posterior(&m, &xq, false).unwrap();
            let mut zeta = Zeta::for_pool(q, pool.len());
            let all: Vec<usize> = (0..pool.len()).collect();
            zeta.accumulate_pool(&spec, &post, &pool, &all, 1.0);
            assert!((outer_value(kind, &zeta) - acq_fsm(&spec, &post, &pool)).abs() < 1e-12);
            let gc = grad_comp(&spec, &m, &xq, &zeta, &pool, pool.len(), &mut rng).unwrap();
            let gf = grad_fsm_pool(&spec, &m, &xq, &pool).unwrap();
            let diff = gc.g.iter().zip(&gf.g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-10, "{kind:?}: {diff}");
        }
    }

    #[test]
    fn detached_posterior_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = model(5, 2, 0.5, &mut rng);
        let xq = rand_batch(2, 2, &mut rng);
        let mut post = posterior(&m, &xq, true).unwrap();
        post.dmean = Some(Mat::zeros(2, 4));
        post.dchol = Some(vec![Mat::zeros(2, 2); 4]);
        let pool = SamplePool::new(8, 2, 1);
        let spec = AcquisitionSpec::new(AcqKind::Sr, AcqForm::Comp);
        let mut zeta = Zeta::for_pool(2, 8);
        zeta.accumulate_pool(&spec, &post, &pool, &[0, 3, 5], 1.0);
        let pairs: Vec<(usize, &[f64])> = (0..8).map(|w| (w, pool.z(w))).collect();
        let g = comp_grad_from_posterior(&spec, &post, &zeta, &pairs).unwrap();
        assert!(g.g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pi_saturated_zeta() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = model(5, 2, 0.5, &mut rng);
        let xq = rand_batch(2, 2, &mut rng);
        let pool = SamplePool::new(8, 2, 1);
        let spec = AcquisitionSpec::new(AcqKind::Pi, AcqForm::Comp);
        let mut zeta = Zeta::for_pool(2, 8);
        for w in 0..8 {
            zeta.add_column(w, &[50.0, 49.0], 1.0);
        }
        let g = grad_comp(&spec, &m, &xq, &zeta, &pool, 8, &mut rng).unwrap();
        assert!(g.g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-8);
    }

    #[test]
    fn erm_determinism_and_degenerate_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = model(6, 2, 0.5, &mut rng);
        let xq = rand_batch(2, 2, &mut rng);
        let spec = AcquisitionSpec::new(AcqKind::Ucb, AcqForm::Erm);
        let a = grad_erm(&spec, &m, &xq, 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = grad_erm(&spec, &m, &xq, 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);

        let mut post = posterior(&m, &xq, true).unwrap();
        post.chol = Mat::zeros(2, 2);
        post.dchol = Some(vec![Mat::zeros(2, 2); 4]);
        let pool = SamplePool::new(16, 2, 1);
        let zs = ZBuffer::standard_normal(5, 2, &mut rng);
        let ge = grad_from_posterior(&spec, &post, zs.iter()).unwrap();
        let gf = grad_from_posterior(&spec, &post, pool.buffer().iter()).unwrap();
        assert_eq!(ge.g, gf.g);
        assert!((ge.value - gf.value).abs() < 1e-15);
    }

    #[test]
    fn erm_is_unbiased_for_fsm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = model(6, 2, 0.5, &mut rng);
        let xq = rand_batch(2, 2, &mut rng);
        let spec = AcquisitionSpec::new(AcqKind::Sr, AcqForm::Erm);
        let pool = SamplePool::new(100_000, 2, 4);
        let target = grad_fsm_pool(&spec, &m, &xq, &pool).unwrap().g;
        let calls = 500;
        let samples: Vec<Vec<f64>> = (0..calls).map(|_| grad_erm(&spec, &m, &xq, 16, &mut rng).unwrap().g).collect();
        for c in 0..target.len() {
            let mean = samples.iter().map(|g| g[c]).sum::<f64>() / calls as f64;
            let var = samples.iter().map(|g| (g[c] - mean).powi(2)).sum::<f64>() / (calls - 1) as f64;
            let se = (var / calls as f64).sqrt();
            assert!((mean - target[c]).abs() <= 3.0 * se * 1.1 + 1e-12, "coord {c}: {mean} vs {}", target[c]);
        }
    }

    #[test]
    fn ei_gradient_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = model(6, 2, 0.5, &mut rng);
        let xq = rand_batch(3, 2, &mut rng);
        let post = posterior(&m, &xq, true).unwrap();
        let pool = SamplePool::new(64, 3, 1);
        let spec = AcquisitionSpec::new(AcqKind::Ei, AcqForm::Fsm).with_incumbent(0.1);
        let base = grad_from_posterior(&spec, &post, pool.buffer().iter()).unwrap();
        let mut shifted = post.clone();
        shifted.mean.iter_mut().for_each(|v| *v += 0.75);
        let s = grad_from_posterior(&spec.with_incumbent(0.85), &shifted, pool.buffer().iter()).unwrap();
        let diff = base.g.iter().zip(&s.g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn lazy_decay_matches_dense_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (q, m) = (3, 5);
        let mut zeta = Zeta::for_pool(q, m);
        let mut dense = Mat::zeros(q, m);
        for _ in 0..2000 {
            let keep: f64 = rng.gen_range(0.5..0.9);
            zeta.decay(keep);
            for j in 0..q {
                for c in 0..m {
                    dense[(j, c)] *= keep;
                }
            }
            let col = rng.gen_range(0..m);
            let v: Vec<f64> = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = rng.gen_range(0.0..0.5);
            zeta.add_column(col, &v, w);
            for j in 0..q {
                dense[(j, col)] += w * v[j];
            }
        }
        assert!(zeta.to_mat().max_abs_diff(&dense) < 1e-12);
        zeta.decay(0.0);
        assert!(zeta.to_mat().as_slice().iter().all(|&v| v == 0.0));
    }
}
