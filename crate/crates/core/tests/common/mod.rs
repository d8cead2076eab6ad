#![allow(dead_code)]

use enmkl::kernel::{build_linear_kernels, FittedPreprocessing, Preprocessing};
use enmkl::{GroupedDataset, KernelMatrix, KernelStack, Targets};
use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gauss_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| gauss(rng))
}

/// `A Aᵀ / n + ridge·I` for a Gaussian `n × n` matrix `A`.
pub fn random_psd(rng: &mut ChaCha8Rng, n: usize, ridge: f64) -> KernelMatrix {
    let a = gauss_matrix(rng, n, n);
    let mut k = &a * a.transpose() / n as f64;
    for i in 0..n {
        k[(i, i)] += ridge;
    }
    let k = (&k + k.transpose()) * 0.5;
    KernelMatrix::square(k, (0..n).map(|i| format!("s{i}")).collect()).unwrap()
}

/// ±1 labels with both classes present.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let y: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        if y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0) {
            return y;
        }
    }
}

/// Feature group: name, column count and signal strength.
#[derive(Clone, Debug)]
pub struct GroupSpec {
    pub name: String,
    pub size: usize,
    pub signal: f64,
}

pub fn group(name: &str, size: usize, signal: f64) -> GroupSpec {
    GroupSpec {
        name: name.to_string(),
        size,
        signal,
    }
}

fn layout(groups: &[GroupSpec]) -> (Vec<String>, Vec<usize>, Vec<String>) {
    let mut names = Vec::new();
    let mut col_groups = Vec::new();
    for (g, gs) in groups.iter().enumerate() {
        for c in 0..gs.size {
            names.push(format!("{}_{c}", gs.name));
            col_groups.push(g);
        }
    }
    (names, col_groups, groups.iter().map(|g| g.name.clone()).collect())
}

/// Balanced ±1 labels; signal groups are shifted by `signal · y` in every column.
pub fn classification_data(rng: &mut ChaCha8Rng, n: usize, groups: &[GroupSpec]) -> GroupedDataset {
    let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let (names, col_groups, group_names) = layout(groups);
    let x = DMatrix::from_fn(n, names.len(), |i, c| gauss(rng) + groups[col_groups[c]].signal * y[i]);
    GroupedDataset::new(x, names, col_groups, group_names, (0..n).map(|i| format!("s{i:03}")).collect())
        .unwrap()
        .with_targets(Targets::labels(y).unwrap())
        .unwrap()
}

/// Targets are a sum of per-group linear responses plus Gaussian noise.
pub fn regression_data(rng: &mut ChaCha8Rng, n: usize, groups: &[GroupSpec], noise: f64) -> GroupedDataset {
    let (names, col_groups, group_names) = layout(groups);
    let x = gauss_matrix(rng, n, names.len());
    let coefs: Vec<f64> = (0..names.len()).map(|_| gauss(rng)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let mut v = 0.0;
            for c in 0..names.len() {
                let gs = &groups[col_groups[c]];
                v += gs.signal * coefs[c] * x[(i, c)] / (gs.size as f64).sqrt();
            }
            v + noise * gauss(rng)
        })
        .collect();
    GroupedDataset::new(x, names, col_groups, group_names, (0..n).map(|i| format!("s{i:03}")).collect())
        .unwrap()
        .with_targets(Targets::regression(y).unwrap())
        .unwrap()
}

/// Linear kernels per group, centered and normalized.
pub fn processed_stack(data: &GroupedDataset) -> KernelStack {
    let raw = build_linear_kernels(data).unwrap();
    FittedPreprocessing::fit(&raw, Preprocessing::default()).unwrap().0
}

/// `qᵀ K q` evaluated with nalgebra.
pub fn quad(k: &KernelMatrix, q: &[f64]) -> f64 {
    let v = nalgebra::DVector::from_column_slice(q);
    (v.transpose() * k.values() * &v)[(0, 0)]
}

pub fn weighted(stack: &KernelStack, beta: &[f64]) -> DMatrix<f64> {
    let n = stack.nrows();
    let mut acc = DMatrix::zeros(n, stack.ncols());
    for (k, &b) in stack.kernels().iter().zip(beta) {
        acc += k.values() * b;
    }
    acc
}
