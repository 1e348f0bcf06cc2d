//! Batch Bayesian optimisation with reparameterised Monte Carlo acquisitions
//! maximised by zero-order, first-order, compositional and quasi-Newton solvers.
//!
//! A batch of `q` points in `d` dimensions is handled as a flat vector of
//! length `dq` laid out as `x[j * d + a]`. The search space is always the unit
//! box; tasks map it onto their native domain.

pub mod acq_grad;
pub mod bench;
pub mod acquisition;
pub mod bo;
pub mod gp;
pub mod linalg;
pub mod opt_comp;
pub mod opt_first;
pub mod opt_second;
pub mod opt_zero;

pub use acq_grad::{AcqGradient, CompGradientCtx, Zeta};
pub use acquisition::{AcqError, AcqForm, AcqKind, AcquisitionSpec, SamplePool};
pub use gp::{BatchPosterior, Dataset, GammaPrior, GpError, GpModel, KernelParams};
pub use linalg::{LinalgError, Mat};

/// Clips every coordinate into `[0, 1]`.
pub fn project_unit(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Views a flat batch as a `q × d` matrix.
pub fn batch_matrix(x: &[f64], q: usize) -> Mat {
    assert!(q > 0 && x.len().is_multiple_of(q), "flat batch length must be a multiple of q");
    Mat::from_vec(q, x.len() / q, x.to_vec())
}

/// Deterministic 64-bit mix of several integers (SplitMix64 finaliser).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
