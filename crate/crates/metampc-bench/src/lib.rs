//! Shared fixtures for the pipeline benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metampc::features::{BasisSet, KernelHyper};
use metampc::meta::{MetaDataset, TaskDataset};

/// Synthetic multi-task regression set: scaled sinusoids with noise.
pub fn synthetic_dataset(tasks: usize, n: usize, seed: u64) -> MetaDataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::new();
    for m in 0..tasks {
        let amp = 0.4 + 0.1 * m as f64;
        let x: DMatrix<f64> = DMatrix::from_fn(n, 1, |_, _| r.gen_range(-1.5..1.5));
        let y = DVector::from_fn(n, |i, _| {
            amp * (3.0 * x[(i, 0)]).cos() + 0.01 * r.gen_range(-1.0..1.0)
        });
        v.push(TaskDataset::new(format!("task{m}"), x, y));
    }
    MetaDataset::new(v, 1)
}

pub fn bench_basis(e: usize) -> BasisSet {
    let z = DMatrix::from_fn(e, 1, |i, _| -1.5 + 3.0 * i as f64 / (e - 1) as f64);
    BasisSet::subset_of_regressors(z, KernelHyper::new(&[0.4], 0.1, 1e-4))
}
