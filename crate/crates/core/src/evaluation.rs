//! Metrics and the nested cross-validation protocol.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};
use crate::kernel::{build_linear_kernels, FittedPreprocessing, GroupedDataset, KernelStack, Preprocessing};
use crate::mkl::{selected_kernel_count, train_enmkl, train_sum_baseline, MklModel, MklOptions, ModelKind};
use crate::solvers::SmoOptions;
use crate::task::{Targets, Task};

fn check_both_classes(truth: &[f64]) -> Result<(usize, usize)> {
    let pos = truth.iter().filter(|&&t| t > 0.0).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MklError::InvalidLabels("metric needs both classes in the true labels".into()));
    }
    Ok((pos, neg))
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MklError::Dimension(format!("{} predictions for {} targets", a.len(), b.len())));
    }
    Ok(())
}

/// Mean of per-class recalls for ±1 labels.
pub fn balanced_accuracy(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(predicted, truth)?;
    let (pos, neg) = check_both_classes(truth)?;
    let (mut tp, mut tn) = (0usize, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        if *t > 0.0 && *p > 0.0 {
            tp += 1;
        } else if *t < 0.0 && *p < 0.0 {
            tn += 1;
        }
    }
    Ok(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}

/// Area under the ROC curve from average ranks (Mann–Whitney U); ties count one half.
pub fn auc(scores: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(scores, truth)?;
    let (pos, neg) = check_both_classes(truth)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MklError::NonFinite("decision values"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks are 1-based; tied block shares the mean rank
        let mean_rank = (start + end + 1) as f64 / 2.0;
        rank_sum_pos += mean_rank * order[start..end].iter().filter(|&&i| truth[i] > 0.0).count() as f64;
        start = end;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn mse(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(predicted, truth)?;
    if truth.is_empty() {
        return Err(MklError::Dimension("mse of an empty set".into()));
    }
    Ok(predicted.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / truth.len() as f64)
}

pub fn pearson_correlation(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(predicted, truth)?;
    let n = truth.len() as f64;
    let mp = predicted.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in predicted.iter().zip(truth) {
        sxy += (p - mp) * (t - mt);
        sxx += (p - mp).powi(2);
        syy += (t - mt).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MklError::InvalidParameter("correlation is undefined for zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Positive decision values map to +1; zero counts as positive.
pub fn decision_to_label(f: f64) -> f64 {
    if f >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Metrics of one prediction set; entries are absent where undefined.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balanced_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<f64>,
}

impl Metrics {
    pub fn compute(task: Task, values: &[f64], truth: &[f64]) -> Metrics {
        match task {
            Task::Classification => {
                let labels: Vec<f64> = values.iter().map(|&f| decision_to_label(f)).collect();
                Metrics {
                    balanced_accuracy: balanced_accuracy(&labels, truth).ok(),
                    auc: auc(values, truth).ok(),
                    ..Default::default()
                }
            }
            Task::Regression => Metrics {
                mse: mse(values, truth).ok(),
                correlation: pearson_correlation(values, truth).ok(),
                ..Default::default()
            },
        }
    }
}

/// Hyperparameter grid searched by the inner loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    #[serde(rename = "C")]
    pub c_values: Vec<f64>,
    pub mu: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            c_values: (-3..=3).map(|e| 10f64.powi(e)).collect(),
            mu: (1..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl HyperGrid {
    pub fn new(c_values: Vec<f64>, mu: Vec<f64>) -> Result<Self> {
        let g = HyperGrid { c_values, mu };
        g.validate()?;
        Ok(g)
    }

    pub fn single(c: f64, mu: f64) -> Result<Self> {
        Self::new(vec![c], vec![mu])
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_values.is_empty() || self.mu.is_empty() {
            return Err(MklError::InvalidParameter("hyperparameter grid lists must be non-empty".into()));
        }
        if let Some(c) = self.c_values.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return Err(MklError::InvalidParameter(format!("grid C value {c} is not positive")));
        }
        if let Some(m) = self.mu.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(MklError::InvalidParameter(format!("grid mu value {m} is outside [0, 1]")));
        }
        Ok(())
    }

    /// Grid points `(C, μ)` for the given model kind; the baseline ignores μ.
    fn points(&self, kind: ModelKind) -> Vec<(f64, f64)> {
        match kind {
            ModelKind::SumBaseline => self.c_values.iter().map(|&c| (c, 0.0)).collect(),
            ModelKind::Enmkl => self
                .c_values
                .iter()
                .flat_map(|&c| self.mu.iter().map(move |&m| (c, m)))
                .collect(),
        }
    }
}

/// Train/test positions into the dataset's sample order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub sample_ids: Vec<String>,
    pub outer: Vec<Split>,
    /// Inner splits per outer fold; positions index the full sample order.
    pub inner: Vec<Vec<Split>>,
    pub blocks: Option<Vec<String>>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn k_outer(&self) -> usize {
        self.outer.len()
    }
}

/// Deals `items` into `k` test folds: whole blocks when `blocks` is given,
/// otherwise stratified by `strata` (or plain shuffled when absent).
fn assign_folds(
    items: &[usize],
    k: usize,
    strata: Option<&[f64]>,
    blocks: Option<&[String]>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(MklError::InvalidParameter(format!("k must be at least 2, got {k}")));
    }
    let mut folds = vec![Vec::new(); k];
    if let Some(blocks) = blocks {
        let mut by_block: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in items {
            by_block.entry(blocks[i].as_str()).or_default().push(i);
        }
        if k > by_block.len() {
            return Err(MklError::InvalidParameter(format!(
                "k = {k} exceeds the {} available blocks",
                by_block.len()
            )));
        }
        let mut groups: Vec<Vec<usize>> = by_block.into_values().collect();
        groups.shuffle(rng);
        for (t, g) in groups.into_iter().enumerate() {
            folds[t % k].extend(g);
        }
    } else {
        if k > items.len() {
            return Err(MklError::InvalidParameter(format!(
                "k = {k} exceeds the {} available samples",
                items.len()
            )));
        }
        let mut dealt = Vec::with_capacity(items.len());
        match strata {
            Some(s) => {
                let mut by_class: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
                for &i in items {
                    by_class.entry(s[i] as i64).or_default().push(i);
                }
                for mut members in by_class.into_values() {
                    members.shuffle(rng);
                    dealt.extend(members);
                }
            }
            None => {
                dealt.extend_from_slice(items);
                dealt.shuffle(rng);
            }
        }
        for (t, i) in dealt.into_iter().enumerate() {
            folds[t % k].push(i);
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

fn splits_from_folds(items: &[usize], folds: Vec<Vec<usize>>) -> Vec<Split> {
    folds
        .into_iter()
        .map(|test| {
            let train = items.iter().copied().filter(|i| test.binary_search(i).is_err()).collect();
            Split { train, test }
        })
        .collect()
}

/// Deterministic nested fold plan. `strata` (class labels) stratifies sample
/// folds; `blocks` keeps samples sharing a block label in the same fold.
pub fn make_fold_plan(
    sample_ids: &[String],
    k_outer: usize,
    k_inner: usize,
    blocks: Option<&[String]>,
    strata: Option<&[f64]>,
    seed: u64,
) -> Result<FoldPlan> {
    let n = sample_ids.len();
    if blocks.is_some_and(|b| b.len() != n) || strata.is_some_and(|s| s.len() != n) {
        return Err(MklError::Dimension("blocks and strata must have one entry per sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..n).collect();
    let outer = splits_from_folds(&all, assign_folds(&all, k_outer, strata, blocks, &mut rng)?);
    let inner = outer
        .iter()
        .map(|s| Ok(splits_from_folds(&s.train, assign_folds(&s.train, k_inner, strata, blocks, &mut rng)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldPlan {
        sample_ids: sample_ids.to_vec(),
        outer,
        inner,
        blocks: blocks.map(<[String]>::to_vec),
        seed,
    })
}

/// Settings shared by every fit inside a cross-validation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvOptions {
    pub kind: ModelKind,
    pub preprocessing: Preprocessing,
    pub conv_tol: f64,
    pub max_iter: usize,
    pub smo: SmoOptions,
    pub selection_threshold: f64,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            kind: ModelKind::Enmkl,
            preprocessing: Preprocessing::default(),
            conv_tol: crate::mkl::DEFAULT_CONV_TOL,
            max_iter: crate::mkl::DEFAULT_MAX_ITER,
            smo: SmoOptions::default(),
            selection_threshold: crate::mkl::SELECTION_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(rename = "C")]
    pub c: f64,
    pub mu: f64,
    /// Mean inner-loop score of the selected grid point.
    pub inner_score: f64,
    pub beta: Vec<f64>,
    pub selected_kernels: usize,
    pub converged: bool,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub fold: usize,
    pub value: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    /// Metrics on predictions pooled over all outer test folds.
    pub metrics: Metrics,
    pub group_names: Vec<String>,
    /// Fold-mean kernel weights.
    pub mean_beta: Vec<f64>,
    /// Kernels selected by the fold-mean weights.
    pub selected_kernels: usize,
    pub mean_selected_kernels: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub task: Task,
    pub model: ModelKind,
    pub grid: HyperGrid,
    pub k_outer: usize,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub aggregate: AggregateReport,
    pub predictions: Vec<PredictionRecord>,
}

impl CvReport {
    /// `(group, mean β)` sorted by decreasing weight, ties by group name.
    pub fn ranked_weights(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self
            .aggregate
            .group_names
            .iter()
            .cloned()
            .zip(self.aggregate.mean_beta.iter().copied())
            .collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        rows
    }
}

fn fit(stack: &KernelStack, targets: &Targets, c: f64, mu: f64, opts: &CvOptions) -> Result<MklModel> {
    match opts.kind {
        ModelKind::SumBaseline => train_sum_baseline(stack, targets, c, opts.smo),
        ModelKind::Enmkl => {
            let o = MklOptions {
                c,
                mu,
                conv_tol: opts.conv_tol,
                max_iter: opts.max_iter,
                smo: opts.smo,
            };
            Ok(train_enmkl(stack, targets, &o)?.model)
        }
    }
}

/// Preprocesses on `train`, fits, and returns predictions for `test`.
fn fit_predict(
    raw: &KernelStack,
    targets: &Targets,
    train: &[usize],
    test: &[usize],
    c: f64,
    mu: f64,
    opts: &CvOptions,
) -> Result<(MklModel, Vec<f64>)> {
    let (processed, prep) = FittedPreprocessing::fit(&raw.select(train, train), opts.preprocessing)?;
    let model = fit(&processed, &targets.select(train), c, mu, opts)?;
    let test_self: Vec<Vec<f64>> = raw
        .kernels()
        .iter()
        .map(|k| test.iter().map(|&i| k.get(i, i)).collect())
        .collect();
    let cross = prep.transform(&raw.select(test, train), &test_self)?;
    let values = model.decision_values(&cross)?;
    Ok((model, values))
}

fn has_both_classes(y: &[f64]) -> bool {
    y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0)
}

/// Inner score: balanced accuracy (higher is better) or MSE (lower is better).
/// `None` marks a fold where the candidate cannot be scored.
fn inner_score(
    targets: &Targets,
    split: &Split,
    prep: &(KernelStack, FittedPreprocessing, KernelStack),
    c: f64,
    mu: f64,
    opts: &CvOptions,
) -> Result<Option<f64>> {
    let (processed, _, cross) = prep;
    let train_t = targets.select(&split.train);
    let val_t = targets.select(&split.test);
    if targets.task == Task::Classification && !(has_both_classes(&train_t.values) && has_both_classes(&val_t.values)) {
        return Ok(None);
    }
    let model = fit(processed, &train_t, c, mu, opts)?;
    let f = model.decision_values(cross)?;
    Ok(Some(match targets.task {
        Task::Classification => {
            let labels: Vec<f64> = f.iter().map(|&v| decision_to_label(v)).collect();
            balanced_accuracy(&labels, &val_t.values)?
        }
        Task::Regression => mse(&f, &val_t.values)?,
    }))
}

/// Picks the best grid point by mean inner score. Ties prefer larger μ, then smaller C.
fn select_point(task: Task, scored: &[((f64, f64), Option<f64>)]) -> Option<((f64, f64), f64)> {
    let better = |a: f64, b: f64| match task {
        Task::Classification => a > b,
        Task::Regression => a < b,
    };
    let mut best: Option<((f64, f64), f64)> = None;
    for &((c, mu), score) in scored {
        let Some(s) = score else { continue };
        best = match best {
            None => Some(((c, mu), s)),
            Some(((bc, bmu), bs)) => {
                let take = better(s, bs) || (s == bs && (mu > bmu || (mu == bmu && c < bc)));
                if take {
                    Some(((c, mu), s))
                } else {
                    best
                }
            }
        };
    }
    best
}

/// Nested cross-validation over precomputed raw (unpreprocessed) square kernels.
pub fn nested_cv_kernels(
    raw: &KernelStack,
    targets: &Targets,
    grid: &HyperGrid,
    plan: &FoldPlan,
    opts: &CvOptions,
) -> Result<CvReport> {
    grid.validate()?;
    if opts.kind == ModelKind::Enmkl && grid.mu.contains(&0.0) {
        return Err(MklError::InvalidParameter(
            "mu = 0 is not an elastic-net setting; run the sum-baseline model instead".into(),
        ));
    }
    if raw.nrows() != targets.len() || plan.sample_ids.as_slice() != raw.row_ids() {
        return Err(MklError::IdMismatch("fold plan, kernels and targets must share the sample order".into()));
    }
    let points = grid.points(opts.kind);
    let mut folds = Vec::with_capacity(plan.outer.len());
    let mut pooled: Vec<Option<(usize, f64)>> = vec![None; targets.len()];

    for (fold, (outer, inner)) in plan.outer.iter().zip(&plan.inner).enumerate() {
        // preprocessing depends only on the inner split, so it is shared by all grid points
        let preps = inner
            .par_iter()
            .map(|s| {
                let (processed, fitted) = FittedPreprocessing::fit(&raw.select(&s.train, &s.train), opts.preprocessing)?;
                let test_self: Vec<Vec<f64>> = raw
                    .kernels()
                    .iter()
                    .map(|k| s.test.iter().map(|&i| k.get(i, i)).collect())
                    .collect();
                let cross = fitted.transform(&raw.select(&s.test, &s.train), &test_self)?;
                Ok((processed, fitted, cross))
            })
            .collect::<Result<Vec<_>>>()?;
        let jobs: Vec<(usize, usize)> = (0..points.len())
            .flat_map(|p| (0..inner.len()).map(move |f| (p, f)))
            .collect();
        let scores = jobs
            .par_iter()
            .map(|&(p, f)| inner_score(targets, &inner[f], &preps[f], points[p].0, points[p].1, opts))
            .collect::<Result<Vec<_>>>()?;
        let scored: Vec<((f64, f64), Option<f64>)> = points
            .iter()
            .enumerate()
            .map(|(p, &pt)| {
                let valid: Vec<f64> = scores[p * inner.len()..(p + 1) * inner.len()]
                    .iter()
                    .flatten()
                    .copied()
                    .collect();
                let mean = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
                (pt, mean)
            })
            .collect();
        let ((c, mu), inner_score) = select_point(targets.task, &scored).ok_or_else(|| {
            MklError::InvalidParameter(format!("no grid point could be scored on the inner folds of outer fold {fold}"))
        })?;

        let (model, values) = fit_predict(raw, targets, &outer.train, &outer.test, c, mu, opts)?;
        let truth: Vec<f64> = outer.test.iter().map(|&i| targets.values[i]).collect();
        for (&i, &v) in outer.test.iter().zip(&values) {
            pooled[i] = Some((fold, v));
        }
        folds.push(FoldReport {
            fold,
            n_train: outer.train.len(),
            n_test: outer.test.len(),
            c,
            mu,
            inner_score,
            selected_kernels: selected_kernel_count(&model.beta, opts.selection_threshold),
            beta: model.beta,
            converged: model.converged,
            metrics: Metrics::compute(targets.task, &values, &truth),
        });
    }

    let mut predictions = Vec::new();
    for (i, p) in pooled.iter().enumerate() {
        if let Some((fold, value)) = *p {
            predictions.push(PredictionRecord {
                sample_id: plan.sample_ids[i].clone(),
                fold,
                value,
                truth: targets.values[i],
            });
        }
    }
    let values: Vec<f64> = predictions.iter().map(|p| p.value).collect();
    let truth: Vec<f64> = predictions.iter().map(|p| p.truth).collect();
    let m = raw.len();
    let nf = folds.len() as f64;
    let mean_beta: Vec<f64> = (0..m).map(|j| folds.iter().map(|f| f.beta[j]).sum::<f64>() / nf).collect();
    let aggregate = AggregateReport {
        metrics: Metrics::compute(targets.task, &values, &truth),
        group_names: raw.group_names().to_vec(),
        selected_kernels: selected_kernel_count(&mean_beta, opts.selection_threshold),
        mean_selected_kernels: folds.iter().map(|f| f.selected_kernels as f64).sum::<f64>() / nf,
        mean_beta,
    };
    Ok(CvReport {
        task: targets.task,
        model: opts.kind,
        grid: grid.clone(),
        k_outer: plan.k_outer(),
        seed: plan.seed,
        folds,
        aggregate,
        predictions,
    })
}

/// Nested cross-validation on a grouped dataset with linear kernels per group.
pub fn nested_cv(data: &GroupedDataset, grid: &HyperGrid, plan: &FoldPlan, opts: &CvOptions) -> Result<CvReport> {
    let targets = data
        .targets()
        .ok_or_else(|| MklError::InvalidParameter("cross-validation needs targets".into()))?;
    let raw = build_linear_kernels(data)?;
    nested_cv_kernels(&raw, targets, grid, plan, opts)
}
