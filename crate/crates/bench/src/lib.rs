//! Criterion benchmarks for acquisition values and their gradients.

use compbo_core::acq_grad::{grad_comp, grad_fsm, Zeta};
use compbo_core::acquisition::acq_fsm;
use compbo_core::gp::posterior;
use compbo_core::{batch_matrix, AcqForm, AcqKind, AcquisitionSpec, Dataset, GpModel, KernelParams, SamplePool};
use criterion::{black_box, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 16;
const M: usize = 512;

fn model(n: usize) -> GpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..DIM).map(|_| rng.gen::<f64>()).collect()).collect();
    let ys = xs.iter().map(|x| x.iter().map(|v| (3.0 * v).sin()).sum()).collect();
    GpModel::new(Dataset::new(xs, ys).unwrap(), KernelParams::new(vec![0.5; DIM], 1.0, 1e-4)).unwrap()
}

fn batch(q: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..q * DIM).map(|_| rng.gen::<f64>()).collect()
}

pub fn acquisition(c: &mut Criterion) {
    let m = model(64);
    let mut group = c.benchmark_group("acq_fsm");
    for q in [1, 4, 16] {
        let pool = SamplePool::new(M, q, 2);
        let xq = batch_matrix(&batch(q), q);
        let post = posterior(&m, &xq, false).unwrap();
        for kind in [AcqKind::Ei, AcqKind::Ucb] {
            let spec = AcquisitionSpec::new(kind, AcqForm::Fsm).with_incumbent(m.dataset.incumbent());
            group.bench_with_input(BenchmarkId::new(kind.name(), q), &q, |b, _| {
                b.iter(|| acq_fsm(&spec, black_box(&post), &pool))
            });
        }
        group.bench_with_input(BenchmarkId::new("posterior", q), &q, |b, _| {
            b.iter(|| posterior(&m, black_box(&xq), true).unwrap())
        });
    }
    group.finish();
}

pub fn gradients(c: &mut Criterion) {
    let m = model(64);
    let mut group = c.benchmark_group("gradient");
    for q in [4, 16] {
        let pool = SamplePool::new(M, q, 3);
        let x = batch(q);
        let xq = batch_matrix(&x, q);
        let fsm = AcquisitionSpec::new(AcqKind::Ucb, AcqForm::Fsm).with_incumbent(m.dataset.incumbent());
        let comp = AcquisitionSpec { form: AcqForm::Comp, ..fsm };
        let zs: Vec<&[f64]> = (0..128).map(|i| pool.z(i)).collect();
        group.bench_with_input(BenchmarkId::new("fsm_k128", q), &q, |b, _| {
            b.iter(|| grad_fsm(&fsm, &m, black_box(&xq), &zs).unwrap())
        });
        let post = posterior(&m, &xq, false).unwrap();
        let mut zeta = Zeta::for_pool(q, M);
        let all: Vec<usize> = (0..M).collect();
        zeta.accumulate_pool(&comp, &post, &pool, &all, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        group.bench_with_input(BenchmarkId::new("comp_k128", q), &q, |b, _| {
            b.iter(|| grad_comp(&comp, &m, black_box(&xq), &zeta, &pool, 128, &mut rng).unwrap())
        });
    }
    group.finish();
}
