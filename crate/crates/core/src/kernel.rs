//! Kernel construction, preprocessing and combination.
//!
//! Base kernels are linear Gram matrices computed per feature group. Train
//! kernels are preprocessed by mean-centering followed by normalization to
//! unit self-similarity; test cross-kernels replay the statistics fitted on
//! the training partition so no test information leaks into preprocessing.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};
use crate::task::{Task, Targets};

/// Relative tolerance used for symmetry checks on train kernels.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Self-similarities at or below this fraction of the kernel scale are
/// treated as zero-norm samples.
const ZERO_NORM_REL: f64 = 1e-12;

/// One Gram matrix together with its sample ids and preprocessing state.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    values: DMatrix<f64>,
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    centered: bool,
    normalized: bool,
}

impl KernelMatrix {
    pub fn new(values: DMatrix<f64>, row_ids: Vec<String>, col_ids: Vec<String>) -> Result<Self> {
        if values.nrows() != row_ids.len() || values.ncols() != col_ids.len() {
            return Err(MklError::Dimension(format!(
                "kernel is {}x{} but has {} row ids and {} column ids",
                values.nrows(),
                values.ncols(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MklError::NonFinite("kernel matrix"));
        }
        Ok(KernelMatrix {
            values,
            row_ids,
            col_ids,
            centered: false,
            normalized: false,
        })
    }

    /// Square train kernel over `ids`.
    pub fn square(values: DMatrix<f64>, ids: Vec<String>) -> Result<Self> {
        let cols = ids.clone();
        Self::new(values, ids, cols)
    }

    /// Builds a square kernel from row-major data; used mostly by tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let values = matrix_from_rows(rows)?;
        Self::square(values, ids)
    }

    pub fn with_flags(mut self, centered: bool, normalized: bool) -> Self {
        self.centered = centered;
        self.normalized = normalized;
        self
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// True for a square kernel whose rows and columns index the same samples.
    pub fn is_train(&self) -> bool {
        self.row_ids == self.col_ids
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows().min(self.ncols()))
            .map(|i| self.values[(i, i)])
            .collect()
    }

    /// Largest absolute asymmetry relative to the largest entry.
    pub fn relative_asymmetry(&self) -> f64 {
        if self.nrows() != self.ncols() {
            return f64::INFINITY;
        }
        let scale = self.values.amax().max(f64::MIN_POSITIVE);
        let n = self.nrows();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.values[(i, j)] - self.values[(j, i)]).abs());
            }
        }
        worst / scale
    }

    pub fn ensure_square(&self) -> Result<()> {
        if self.nrows() != self.ncols() {
            return Err(MklError::NotSquare {
                rows: self.nrows(),
                cols: self.ncols(),
            });
        }
        Ok(())
    }

    pub fn ensure_symmetric(&self) -> Result<()> {
        self.ensure_square()?;
        let asym = self.relative_asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(MklError::NotSymmetric { max_asym: asym });
        }
        Ok(())
    }

    /// Sub-kernel on the given row and column positions; flags are kept.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> KernelMatrix {
        let values = DMatrix::from_fn(rows.len(), cols.len(), |a, b| self.values[(rows[a], cols[b])]);
        KernelMatrix {
            values,
            row_ids: rows.iter().map(|&i| self.row_ids[i].clone()).collect(),
            col_ids: cols.iter().map(|&j| self.col_ids[j].clone()).collect(),
            centered: self.centered,
            normalized: self.normalized,
        }
    }
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(MklError::Dimension("ragged rows".into()));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

/// Ordered collection of base kernels over a shared sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStack {
    kernels: Vec<KernelMatrix>,
    group_names: Vec<String>,
    group_sizes: Vec<usize>,
}

impl KernelStack {
    pub fn new(kernels: Vec<KernelMatrix>, group_names: Vec<String>, group_sizes: Vec<usize>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(MklError::Dimension("kernel stack needs at least one kernel".into()));
        }
        if group_names.len() != kernels.len() || group_sizes.len() != kernels.len() {
            return Err(MklError::Dimension(format!(
                "{} kernels but {} group names and {} group sizes",
                kernels.len(),
                group_names.len(),
                group_sizes.len()
            )));
        }
        let first = &kernels[0];
        for (k, name) in kernels.iter().zip(&group_names).skip(1) {
            if k.row_ids != first.row_ids || k.col_ids != first.col_ids {
                return Err(MklError::IdMismatch(format!(
                    "kernel `{name}` does not share the sample ids of `{}`",
                    group_names[0]
                )));
            }
        }
        let mut sorted = group_names.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(MklError::InvalidParameter(format!("duplicate group name `{}`", w[0])));
        }
        Ok(KernelStack {
            kernels,
            group_names,
            group_sizes,
        })
    }

    /// Stack with generated group names, convenient for synthetic problems.
    pub fn from_kernels(kernels: Vec<KernelMatrix>) -> Result<Self> {
        let m = kernels.len();
        let names = (0..m).map(|j| format!("k{j}")).collect();
        let sizes = vec![0; m];
        Self::new(kernels, names, sizes)
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernels(&self) -> &[KernelMatrix] {
        &self.kernels
    }

    pub fn kernel(&self, j: usize) -> &KernelMatrix {
        &self.kernels[j]
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn row_ids(&self) -> &[String] {
        self.kernels[0].row_ids()
    }

    pub fn col_ids(&self) -> &[String] {
        self.kernels[0].col_ids()
    }

    pub fn nrows(&self) -> usize {
        self.kernels[0].nrows()
    }

    pub fn ncols(&self) -> usize {
        self.kernels[0].ncols()
    }

    pub fn select(&self, rows: &[usize], cols: &[usize]) -> KernelStack {
        KernelStack {
            kernels: self.kernels.iter().map(|k| k.select(rows, cols)).collect(),
            group_names: self.group_names.clone(),
            group_sizes: self.group_sizes.clone(),
        }
    }

    pub(crate) fn map_kernels<F>(&self, f: F) -> Result<KernelStack>
    where
        F: Fn(usize, &KernelMatrix) -> Result<KernelMatrix> + Sync,
    {
        let kernels = self
            .kernels
            .par_iter()
            .enumerate()
            .map(|(j, k)| f(j, k))
            .collect::<Result<Vec<_>>>()?;
        KernelStack::new(kernels, self.group_names.clone(), self.group_sizes.clone())
    }
}

/// Feature matrix with a partition of its columns into named groups.
#[derive(Debug, Clone)]
pub struct GroupedDataset {
    features: DMatrix<f64>,
    feature_names: Vec<String>,
    column_groups: Vec<usize>,
    group_names: Vec<String>,
    sample_ids: Vec<String>,
    targets: Option<Targets>,
}

impl GroupedDataset {
    pub fn new(
        features: DMatrix<f64>,
        feature_names: Vec<String>,
        column_groups: Vec<usize>,
        group_names: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = features.shape();
        if feature_names.len() != p || column_groups.len() != p {
            return Err(MklError::Dimension(format!(
                "{p} feature columns but {} names and {} group assignments",
                feature_names.len(),
                column_groups.len()
            )));
        }
        if sample_ids.len() != n {
            return Err(MklError::Dimension(format!("{n} samples but {} sample ids", sample_ids.len())));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(MklError::NonFinite("features"));
        }
        let m = group_names.len();
        if let Some(&g) = column_groups.iter().find(|&&g| g >= m) {
            return Err(MklError::Dimension(format!("group index {g} out of range for {m} groups")));
        }
        let mut sizes = vec![0usize; m];
        for &g in &column_groups {
            sizes[g] += 1;
        }
        if let Some(j) = sizes.iter().position(|&s| s == 0) {
            return Err(MklError::EmptyGroup(group_names[j].clone()));
        }
        Ok(GroupedDataset {
            features,
            feature_names,
            column_groups,
            group_names,
            sample_ids,
            targets: None,
        })
    }

    pub fn with_targets(mut self, targets: Targets) -> Result<Self> {
        if targets.len() != self.nsamples() {
            return Err(MklError::Dimension(format!(
                "{} targets for {} samples",
                targets.len(),
                self.nsamples()
            )));
        }
        self.targets = Some(targets);
        Ok(self)
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn column_groups(&self) -> &[usize] {
        &self.column_groups
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn targets(&self) -> Option<&Targets> {
        self.targets.as_ref()
    }

    pub fn task(&self) -> Option<Task> {
        self.targets.as_ref().map(|t| t.task)
    }

    pub fn nsamples(&self) -> usize {
        self.features.nrows()
    }

    pub fn ngroups(&self) -> usize {
        self.group_names.len()
    }

    /// Column positions belonging to group `j`, in ascending order.
    pub fn group_columns(&self, j: usize) -> Vec<usize> {
        self.column_groups
            .iter()
            .enumerate()
            .filter_map(|(c, &g)| (g == j).then_some(c))
            .collect()
    }

    /// Dense copy of the group-`j` features (n x p_j).
    pub fn group_features(&self, j: usize) -> DMatrix<f64> {
        let cols = self.group_columns(j);
        DMatrix::from_fn(self.nsamples(), cols.len(), |i, c| self.features[(i, cols[c])])
    }

    /// Dataset restricted to the given sample positions.
    pub fn select_samples(&self, idx: &[usize]) -> GroupedDataset {
        GroupedDataset {
            features: self.features.select_rows(idx),
            feature_names: self.feature_names.clone(),
            column_groups: self.column_groups.clone(),
            group_names: self.group_names.clone(),
            sample_ids: idx.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            targets: self.targets.as_ref().map(|t| t.select(idx)),
        }
    }
}

/// Gram matrix of inner products between rows of `a` and rows of `b`.
/// When `a` and `b` are the same matrix the result is exactly symmetric.
pub(crate) fn linear_gram(a: &DMatrix<f64>, b: &DMatrix<f64>, symmetric: bool) -> DMatrix<f64> {
    let (na, nb) = (a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(na, nb);
    for i in 0..na {
        let start = if symmetric { i } else { 0 };
        for j in start..nb {
            let v = a.row(i).dot(&b.row(j));
            out[(i, j)] = v;
            if symmetric {
                out[(j, i)] = v;
            }
        }
    }
    out
}

/// One linear kernel per feature group; outputs are raw (not centered, not normalized).
pub fn build_linear_kernels(data: &GroupedDataset) -> Result<KernelStack> {
    let m = data.ngroups();
    let kernels = (0..m)
        .into_par_iter()
        .map(|j| {
            let x = data.group_features(j);
            if x.ncols() == 0 {
                return Err(MklError::EmptyGroup(data.group_names()[j].clone()));
            }
            let k = linear_gram(&x, &x, true);
            KernelMatrix::square(k, data.sample_ids().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let sizes = (0..m).map(|j| data.group_columns(j).len()).collect();
    KernelStack::new(kernels, data.group_names().to_vec(), sizes)
}

/// Raw linear cross-kernels between `test` rows and `train` rows, plus the raw
/// test self-similarities needed for normalization.
pub fn build_linear_cross_kernels(test: &GroupedDataset, train: &GroupedDataset) -> Result<(KernelStack, Vec<Vec<f64>>)> {
    if test.column_groups() != train.column_groups() || test.group_names() != train.group_names() {
        return Err(MklError::Dimension("test and train datasets use different group maps".into()));
    }
    let m = train.ngroups();
    let parts = (0..m)
        .into_par_iter()
        .map(|j| {
            let xt = test.group_features(j);
            let xr = train.group_features(j);
            let k = linear_gram(&xt, &xr, false);
            let self_sim: Vec<f64> = (0..xt.nrows()).map(|i| xt.row(i).norm_squared()).collect();
            Ok((
                KernelMatrix::new(k, test.sample_ids().to_vec(), train.sample_ids().to_vec())?,
                self_sim,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (kernels, diags): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let sizes = (0..m).map(|j| train.group_columns(j).len()).collect();
    Ok((KernelStack::new(kernels, train.group_names().to_vec(), sizes)?, diags))
}

/// Training statistics needed to center cross-kernels consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringStats {
    /// Mean of each training column, `(1/n) Σ_k K(k, i)`.
    pub col_means: Vec<f64>,
    pub grand_mean: f64,
}

impl CenteringStats {
    pub fn fit(k_train: &KernelMatrix) -> Result<Self> {
        k_train.ensure_square()?;
        let n = k_train.nrows();
        if n == 0 {
            return Err(MklError::Dimension("empty kernel".into()));
        }
        let nf = n as f64;
        let col_means: Vec<f64> = (0..n).map(|i| k_train.values.column(i).sum() / nf).collect();
        let grand_mean = col_means.iter().sum::<f64>() / nf;
        Ok(CenteringStats { col_means, grand_mean })
    }

    fn center_rows(&self, k: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
        let n = self.col_means.len();
        if k.ncols() != n {
            return Err(MklError::Dimension(format!(
                "cross-kernel has {} columns, training kernel has {n}",
                k.ncols()
            )));
        }
        let row_means: Vec<f64> = (0..k.nrows()).map(|a| k.row(a).sum() / n as f64).collect();
        let out = DMatrix::from_fn(k.nrows(), n, |a, i| {
            k[(a, i)] - self.col_means[i] - row_means[a] + self.grand_mean
        });
        Ok((out, row_means))
    }

    /// Centered self-similarities `‖x_a − m‖²` of test samples from their raw
    /// self-similarities and raw cross-kernel rows.
    pub fn center_self_similarity(&self, raw_self: &[f64], k_test_raw: &KernelMatrix) -> Result<Vec<f64>> {
        if raw_self.len() != k_test_raw.nrows() {
            return Err(MklError::Dimension(format!(
                "{} self-similarities for {} test rows",
                raw_self.len(),
                k_test_raw.nrows()
            )));
        }
        let n = self.col_means.len() as f64;
        Ok(raw_self
            .iter()
            .enumerate()
            .map(|(a, &d)| d - 2.0 * k_test_raw.values.row(a).sum() / n + self.grand_mean)
            .collect())
    }
}

/// Double-centering of a square train kernel.
pub fn center_train_kernel(k: &KernelMatrix) -> Result<KernelMatrix> {
    k.ensure_square()?;
    if k.centered {
        return Err(MklError::InvalidParameter("kernel is already centered".into()));
    }
    let stats = CenteringStats::fit(k)?;
    let n = k.nrows();
    let row_means: Vec<f64> = (0..n).map(|i| k.values.row(i).sum() / n as f64).collect();
    let mut out = DMatrix::from_fn(n, n, |i, j| {
        k.values[(i, j)] - row_means[i] - stats.col_means[j] + stats.grand_mean
    });
    symmetrize(&mut out);
    Ok(KernelMatrix {
        values: out,
        row_ids: k.row_ids.clone(),
        col_ids: k.col_ids.clone(),
        centered: true,
        normalized: k.normalized,
    })
}

/// Centers a raw test cross-kernel with the training kernel's statistics.
pub fn center_test_kernel(k_test: &KernelMatrix, k_train: &KernelMatrix) -> Result<KernelMatrix> {
    k_train.ensure_square()?;
    if k_train.centered || k_test.centered {
        return Err(MklError::InvalidParameter("center_test_kernel expects uncentered kernels".into()));
    }
    if k_test.col_ids != k_train.row_ids {
        return Err(MklError::IdMismatch(
            "test kernel columns must be the training samples in training order".into(),
        ));
    }
    let stats = CenteringStats::fit(k_train)?;
    center_test_with(k_test, &stats)
}

pub(crate) fn center_test_with(k_test: &KernelMatrix, stats: &CenteringStats) -> Result<KernelMatrix> {
    let (values, _) = stats.center_rows(&k_test.values)?;
    Ok(KernelMatrix {
        values,
        row_ids: k_test.row_ids.clone(),
        col_ids: k_test.col_ids.clone(),
        centered: true,
        normalized: k_test.normalized,
    })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn check_self_similarities(s: &[f64], ids: &[String], scale: f64) -> Result<()> {
    let floor = ZERO_NORM_REL * scale.max(1.0);
    for (v, id) in s.iter().zip(ids) {
        if !(*v > floor) {
            return Err(MklError::ZeroNorm(id.clone()));
        }
    }
    Ok(())
}

/// Scales a square train kernel to unit self-similarity: `K(i,j)/sqrt(K(i,i)K(j,j))`.
pub fn normalize_kernel(k: &KernelMatrix) -> Result<KernelMatrix> {
    k.ensure_square()?;
    if !k.is_train() {
        return Err(MklError::IdMismatch(
            "normalize_kernel needs a train kernel; use normalize_test_kernel for cross-kernels".into(),
        ));
    }
    let diag = k.diagonal();
    check_self_similarities(&diag, &k.row_ids, k.values.amax())?;
    let inv: Vec<f64> = diag.iter().map(|d| 1.0 / d.sqrt()).collect();
    let n = k.nrows();
    let mut out = DMatrix::from_fn(n, n, |i, j| k.values[(i, j)] * inv[i] * inv[j]);
    symmetrize(&mut out);
    for i in 0..n {
        out[(i, i)] = 1.0;
    }
    Ok(KernelMatrix {
        values: out,
        row_ids: k.row_ids.clone(),
        col_ids: k.col_ids.clone(),
        centered: k.centered,
        normalized: true,
    })
}

/// Normalizes a cross-kernel given the self-similarities of its test rows and
/// of the training samples indexing its columns (both after any centering).
pub fn normalize_test_kernel(k_test: &KernelMatrix, test_self: &[f64], train_self: &[f64]) -> Result<KernelMatrix> {
    if test_self.len() != k_test.nrows() || train_self.len() != k_test.ncols() {
        return Err(MklError::Dimension(format!(
            "cross-kernel is {}x{} but got {} test and {} train self-similarities",
            k_test.nrows(),
            k_test.ncols(),
            test_self.len(),
            train_self.len()
        )));
    }
    let scale = train_self.iter().chain(test_self).fold(0.0f64, |a, v| a.max(v.abs()));
    check_self_similarities(test_self, &k_test.row_ids, scale)?;
    check_self_similarities(train_self, &k_test.col_ids, scale)?;
    let values = DMatrix::from_fn(k_test.nrows(), k_test.ncols(), |a, i| {
        k_test.values[(a, i)] / (test_self[a] * train_self[i]).sqrt()
    });
    Ok(KernelMatrix {
        values,
        row_ids: k_test.row_ids.clone(),
        col_ids: k_test.col_ids.clone(),
        centered: k_test.centered,
        normalized: true,
    })
}

fn check_beta(m: usize, beta: &[f64]) -> Result<()> {
    if beta.len() != m {
        return Err(MklError::InvalidWeights(format!("{} weights for {m} kernels", beta.len())));
    }
    if let Some(b) = beta.iter().find(|b| !b.is_finite() || **b < 0.0) {
        return Err(MklError::InvalidWeights(format!("weight {b} is negative or not finite")));
    }
    if !beta.iter().any(|&b| b > 0.0) {
        return Err(MklError::InvalidWeights("at least one weight must be positive".into()));
    }
    Ok(())
}

/// Entrywise `Σ_j β_j K_j`.
pub fn weighted_sum(stack: &KernelStack, beta: &[f64]) -> Result<KernelMatrix> {
    check_beta(stack.len(), beta)?;
    Ok(weighted_sum_dropping(stack, beta, 0.0))
}

/// `Σ_j β_j K_j` over kernels with `β_j > drop_below`; weights are not validated.
pub(crate) fn weighted_sum_dropping(stack: &KernelStack, beta: &[f64], drop_below: f64) -> KernelMatrix {
    let first = stack.kernel(0);
    let mut acc = DMatrix::zeros(first.nrows(), first.ncols());
    for (k, &b) in stack.kernels().iter().zip(beta) {
        if b > drop_below {
            acc.zip_apply(&k.values, |a, v| *a += b * v);
        }
    }
    KernelMatrix {
        values: acc,
        row_ids: first.row_ids.clone(),
        col_ids: first.col_ids.clone(),
        centered: stack.kernels().iter().all(|k| k.centered),
        normalized: false,
    }
}

/// Which preprocessing steps to apply; the order is always center then normalize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub center: bool,
    pub normalize: bool,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Preprocessing {
            center: true,
            normalize: true,
        }
    }
}

/// Per-kernel statistics fitted on a training partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    pub group: String,
    pub centering: Option<CenteringStats>,
    /// Training self-similarities after centering, used to normalize test rows.
    pub train_self: Option<Vec<f64>>,
}

/// Preprocessing fitted on raw training kernels and replayable on test rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPreprocessing {
    pub config: Preprocessing,
    pub train_ids: Vec<String>,
    pub kernels: Vec<KernelStats>,
}

impl FittedPreprocessing {
    /// Fits statistics on a raw square train stack and returns the processed stack.
    pub fn fit(raw: &KernelStack, config: Preprocessing) -> Result<(KernelStack, Self)> {
        let stats: Vec<(KernelMatrix, KernelStats)> = raw
            .kernels()
            .par_iter()
            .zip(raw.group_names())
            .map(|(k, name)| {
                k.ensure_symmetric()?;
                let (k, centering) = if config.center {
                    let stats = CenteringStats::fit(k)?;
                    (center_train_kernel(k)?, Some(stats))
                } else {
                    (k.clone(), None)
                };
                let (k, train_self) = if config.normalize {
                    let d = k.diagonal();
                    (normalize_kernel(&k)?, Some(d))
                } else {
                    (k, None)
                };
                Ok((
                    k,
                    KernelStats {
                        group: name.clone(),
                        centering,
                        train_self,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let (kernels, stats): (Vec<_>, Vec<_>) = stats.into_iter().unzip();
        let processed = KernelStack::new(kernels, raw.group_names().to_vec(), raw.group_sizes().to_vec())?;
        Ok((
            processed,
            FittedPreprocessing {
                config,
                train_ids: raw.row_ids().to_vec(),
                kernels: stats,
            },
        ))
    }

    /// Applies the fitted statistics to raw cross-kernels (test x train).
    /// `raw_test_self[j][a]` is the raw self-similarity of test sample `a` under kernel `j`.
    pub fn transform(&self, raw_cross: &KernelStack, raw_test_self: &[Vec<f64>]) -> Result<KernelStack> {
        if raw_cross.len() != self.kernels.len() {
            return Err(MklError::Dimension(format!(
                "{} cross-kernels for {} fitted kernels",
                raw_cross.len(),
                self.kernels.len()
            )));
        }
        if raw_cross.col_ids() != self.train_ids.as_slice() {
            return Err(MklError::IdMismatch(
                "cross-kernel columns must be the training samples in training order".into(),
            ));
        }
        if self.config.normalize && raw_test_self.len() != raw_cross.len() {
            return Err(MklError::Dimension("test self-similarities are required for normalization".into()));
        }
        raw_cross.map_kernels(|j, k| {
            let st = &self.kernels[j];
            let mut k = k.clone();
            let mut test_self = raw_test_self.get(j).cloned();
            if let Some(c) = &st.centering {
                if let Some(ts) = &test_self {
                    test_self = Some(c.center_self_similarity(ts, &k)?);
                }
                k = center_test_with(&k, c)?;
            }
            if let Some(train_self) = &st.train_self {
                let ts = test_self.ok_or_else(|| MklError::Dimension("missing test self-similarities".into()))?;
                k = normalize_test_kernel(&k, &ts, train_self)?;
            }
            Ok(k)
        })
    }
}
