//! Elastic-net MKL by alternating minimization.
//!
//! Each outer iteration solves a single-kernel SVM or KRR on `Σ β_j K_j`,
//! measures the block norms `‖w_j‖ = β_j √(qᵀ K_j q)`, and updates the
//! weights in closed form:
//!
//! ```text
//! λ_j = ‖w_j‖ / (√μ Σ_k ‖w_k‖)
//! β_j = 1 / (√μ/λ_j + 1 − μ)
//! ```
//!
//! On exit the dual weights are scaled by `Σ β_j` and `β` is normalized to
//! unit sum, which leaves every decision value unchanged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};
use crate::kernel::{
    build_linear_kernels, weighted_sum_dropping, FittedPreprocessing, GroupedDataset, KernelMatrix, KernelStack, Preprocessing,
};
use crate::solvers::{predict, solve_krr_dual, solve_svm_dual_with, SmoOptions};
use crate::task::{check_labels, Targets, Task};

pub const DEFAULT_CONV_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 200;
/// Weights below this are set to zero and their kernel leaves the weighted sum.
pub const KERNEL_DROP_THRESHOLD: f64 = 1e-12;
/// Default threshold for counting a kernel as selected.
pub const SELECTION_THRESHOLD: f64 = 1e-5;

/// Which training route produced a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Enmkl,
    SumBaseline,
}

/// Origin of the base kernels; primal weights exist only for linear kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Precomputed,
}

/// Per-group primal weight vector over that group's feature columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPrimal {
    pub group: String,
    pub feature_names: Vec<String>,
    /// Training means subtracted before the inner product (zeros when uncentered).
    pub feature_means: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Primal form of a linear-kernel model: `f(x) = Σ_j ⟨w_j, x̃_j⟩ + b`, where
/// `x̃_j` is the group-`j` slice of `x`, centered by training means and, when
/// `normalize` is set, scaled to unit norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalWeights {
    pub groups: Vec<GroupPrimal>,
    pub bias: f64,
    pub normalize: bool,
}

/// Trained MKL model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MklModel {
    pub task: Task,
    pub kind: ModelKind,
    pub mu: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub group_names: Vec<String>,
    pub beta: Vec<f64>,
    pub sample_ids: Vec<String>,
    pub alpha: Vec<f64>,
    /// Training labels (±1) for classification models; dual weights enter as `α_i y_i`.
    pub labels: Option<Vec<f64>>,
    /// SVM bias or KRR target offset.
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
    pub kernel_kind: KernelKind,
    pub preprocessing: Option<FittedPreprocessing>,
    /// Original class names for `[-1, +1]`.
    pub class_names: Option<[String; 2]>,
    pub primal: Option<PrimalWeights>,
}

impl MklModel {
    /// Decision values (SVM) or predicted targets (KRR) for preprocessed
    /// cross-kernels whose columns are the training samples.
    pub fn decision_values(&self, cross: &KernelStack) -> Result<Vec<f64>> {
        if cross.len() != self.beta.len() {
            return Err(MklError::Dimension(format!(
                "{} cross-kernels for a model with {} kernels",
                cross.len(),
                self.beta.len()
            )));
        }
        if cross.col_ids() != self.sample_ids.as_slice() {
            return Err(MklError::IdMismatch("cross-kernel columns must match the model's training samples".into()));
        }
        let k = weighted_sum_dropping(cross, &self.beta, 0.0);
        predict(&self.alpha, self.labels.as_deref(), self.bias, &k)
    }

    /// Replays the stored preprocessing on raw cross-kernels, then predicts.
    pub fn decision_values_raw(&self, raw_cross: &KernelStack, raw_test_self: &[Vec<f64>]) -> Result<Vec<f64>> {
        match &self.preprocessing {
            Some(p) => self.decision_values(&p.transform(raw_cross, raw_test_self)?),
            None => self.decision_values(raw_cross),
        }
    }

    pub fn selected_kernels(&self, threshold: f64) -> usize {
        selected_kernel_count(&self.beta, threshold)
    }
}

/// One outer iteration of the alternating scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Kernel weights used for this iteration's inner solve (not normalized).
    pub beta: Vec<f64>,
    pub w_norms: Vec<f64>,
    /// λ computed from this iteration's block norms (empty when degenerate).
    pub lambda: Vec<f64>,
    /// Elastic-net objective at the weights that produced `beta`.
    pub objective: f64,
    /// Block-norm objective of the same primal point.
    pub block_norm_objective: f64,
    pub inner_iterations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MklOptions {
    pub c: f64,
    pub mu: f64,
    pub conv_tol: f64,
    pub max_iter: usize,
    pub smo: SmoOptions,
}

impl MklOptions {
    pub fn new(c: f64, mu: f64) -> Self {
        MklOptions {
            c,
            mu,
            conv_tol: DEFAULT_CONV_TOL,
            max_iter: DEFAULT_MAX_ITER,
            smo: SmoOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: MklModel,
    pub trace: Vec<IterationRecord>,
}

fn dual_coefficients(alpha: &[f64], labels: Option<&[f64]>) -> Vec<f64> {
    match labels {
        Some(y) => alpha.iter().zip(y).map(|(a, y)| a * y).collect(),
        None => alpha.to_vec(),
    }
}

fn quadratic_form(k: &KernelMatrix, q: &[f64]) -> f64 {
    let v = k.values();
    let n = q.len();
    let mut acc = 0.0;
    for i in 0..n {
        if q[i] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for (l, &ql) in q.iter().enumerate() {
            row += v[(i, l)] * ql;
        }
        acc += q[i] * row;
    }
    acc
}

/// Block norms `β_j √(qᵀ K_j q)` with `q = α∘y` (classification) or `q = α`.
pub fn compute_block_norms(stack: &KernelStack, alpha: &[f64], labels: Option<&[f64]>, beta: &[f64]) -> Result<Vec<f64>> {
    let n = stack.nrows();
    if alpha.len() != n || beta.len() != stack.len() || labels.is_some_and(|y| y.len() != n) {
        return Err(MklError::Dimension(format!(
            "block norms need {n} dual weights and {} kernel weights",
            stack.len()
        )));
    }
    let q = dual_coefficients(alpha, labels);
    let q_sq: f64 = q.iter().map(|v| v * v).sum();
    stack
        .kernels()
        .par_iter()
        .zip(beta.par_iter())
        .enumerate()
        .map(|(j, (k, &b))| {
            if b == 0.0 {
                return Ok(0.0);
            }
            let qf = quadratic_form(k, &q);
            if qf < -1e-8 * q_sq {
                return Err(MklError::NotPsd { kernel: j, value: qf });
            }
            Ok(b * qf.max(0.0).sqrt())
        })
        .collect()
}

fn check_mu(mu: f64) -> Result<()> {
    if mu == 0.0 {
        return Err(MklError::InvalidParameter(
            "mu = 0 makes the elastic-net weight update undefined; use the sum-baseline model for mu = 0".into(),
        ));
    }
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(MklError::InvalidParameter(format!("mu must lie in (0, 1], got {mu}")));
    }
    Ok(())
}

/// `λ_j = ‖w_j‖ / (√μ Σ_k ‖w_k‖)`, so that `Σ_j √μ λ_j = 1`.
pub fn update_lambda(w_norms: &[f64], mu: f64) -> Result<Vec<f64>> {
    check_mu(mu)?;
    if w_norms.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(MklError::InvalidParameter("block norms must be finite and nonnegative".into()));
    }
    let total: f64 = w_norms.iter().sum();
    if total <= 0.0 {
        return Err(MklError::InvalidParameter("all block norms are zero".into()));
    }
    let denom = mu.sqrt() * total;
    Ok(w_norms.iter().map(|w| w / denom).collect())
}

/// `β_j = 1 / (√μ/λ_j + 1 − μ)`, evaluated as `λ_j / (√μ + (1 − μ) λ_j)` so
/// that `λ_j = 0` maps to `β_j = 0` and `μ = 1` gives `β = λ` exactly.
pub fn update_beta(lambda: &[f64], mu: f64) -> Result<Vec<f64>> {
    check_mu(mu)?;
    if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(MklError::InvalidParameter("lambda must be finite and nonnegative".into()));
    }
    let s = mu.sqrt();
    Ok(lambda.iter().map(|&l| l / (s + (1.0 - mu) * l)).collect())
}

/// Number of kernels with weight above `threshold`.
pub fn selected_kernel_count(beta: &[f64], threshold: f64) -> usize {
    beta.iter().filter(|&&b| b > threshold).count()
}

fn unit_sum(beta: &[f64]) -> Vec<f64> {
    let s: f64 = beta.iter().sum();
    beta.iter().map(|b| b / s).collect()
}

/// Elastic-net objective `½ Σ (√μ/λ_j + 1 − μ) ‖w_j‖² + loss`.
/// Blocks with `‖w_j‖ = 0` contribute nothing regardless of `λ_j`.
pub fn elastic_net_objective(w_norms: &[f64], lambda: &[f64], mu: f64, loss: f64) -> f64 {
    let s = mu.sqrt();
    let penalty: f64 = w_norms
        .iter()
        .zip(lambda)
        .map(|(&w, &l)| {
            if w == 0.0 {
                0.0
            } else if mu == 0.0 {
                w * w
            } else {
                (s / l + 1.0 - mu) * w * w
            }
        })
        .sum();
    0.5 * penalty + loss
}

/// Block-norm objective `μ/2 (Σ ‖w_j‖)² + (1−μ)/2 Σ ‖w_j‖² + loss`.
pub fn block_norm_objective(w_norms: &[f64], mu: f64, loss: f64) -> f64 {
    let l1: f64 = w_norms.iter().sum();
    let l2: f64 = w_norms.iter().map(|w| w * w).sum();
    0.5 * mu * l1 * l1 + 0.5 * (1.0 - mu) * l2 + loss
}

/// Hinge loss `C Σ max(0, 1 − y f)` or squared loss `(C/n) Σ (y − f)²`.
pub fn data_loss(task: Task, targets: &[f64], predictions: &[f64], c: f64) -> f64 {
    match task {
        Task::Classification => c * targets.iter().zip(predictions).map(|(y, f)| (1.0 - y * f).max(0.0)).sum::<f64>(),
        Task::Regression => {
            let n = targets.len() as f64;
            c / n * targets.iter().zip(predictions).map(|(y, f)| (y - f).powi(2)).sum::<f64>()
        }
    }
}

/// Objective values at a primal point defined by `(β, α, bias)` with
/// `w_j = β_j Σ_i q_i φ_j(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub w_norms: Vec<f64>,
    pub loss: f64,
    /// Elastic-net form with the supplied λ, or with λ from the block norms.
    pub elastic_net: f64,
    pub block_norm: f64,
}

/// Evaluates the primal objectives at `(β, α, bias)`. With `lambda = None`
/// the optimal λ for the current block norms is substituted.
pub fn enmkl_objective(
    stack: &KernelStack,
    targets: &Targets,
    c: f64,
    mu: f64,
    beta: &[f64],
    alpha: &[f64],
    bias: f64,
    lambda: Option<&[f64]>,
) -> Result<ObjectiveValue> {
    let labels = (targets.task == Task::Classification).then_some(targets.values.as_slice());
    let w_norms = compute_block_norms(stack, alpha, labels, beta)?;
    let k = weighted_sum_dropping(stack, beta, 0.0);
    let f = predict(alpha, labels, bias, &k)?;
    let loss = data_loss(targets.task, &targets.values, &f, c);
    let lambda = match lambda {
        Some(l) => l.to_vec(),
        None if mu > 0.0 && w_norms.iter().any(|&w| w > 0.0) => update_lambda(&w_norms, mu)?,
        None => vec![0.0; w_norms.len()],
    };
    Ok(ObjectiveValue {
        elastic_net: elastic_net_objective(&w_norms, &lambda, mu, loss),
        block_norm: block_norm_objective(&w_norms, mu, loss),
        w_norms,
        loss,
    })
}

struct InnerSolution {
    alpha: Vec<f64>,
    bias: f64,
    iterations: u64,
}

fn inner_solve(k: &KernelMatrix, targets: &Targets, opts: &MklOptions, warm: Option<&[f64]>) -> Result<InnerSolution> {
    match targets.task {
        Task::Classification => {
            let s = solve_svm_dual_with(k, &targets.values, opts.c, opts.smo, warm)?;
            Ok(InnerSolution {
                alpha: s.alpha,
                bias: s.bias,
                iterations: s.iterations,
            })
        }
        Task::Regression => {
            let s = solve_krr_dual(k, &targets.values, opts.c)?;
            Ok(InnerSolution {
                alpha: s.alpha,
                bias: s.target_offset,
                iterations: 1,
            })
        }
    }
}

fn validate_inputs(stack: &KernelStack, targets: &Targets, opts: &MklOptions) -> Result<()> {
    if stack.nrows() != targets.len() {
        return Err(MklError::Dimension(format!(
            "{} targets for {} training samples",
            targets.len(),
            stack.nrows()
        )));
    }
    if !stack.kernels()[0].is_train() {
        return Err(MklError::IdMismatch("training requires square train kernels".into()));
    }
    if targets.task == Task::Classification {
        check_labels(&targets.values)?;
    }
    if !(opts.c > 0.0 && opts.c.is_finite()) {
        return Err(MklError::InvalidParameter(format!("C must be positive and finite, got {}", opts.c)));
    }
    if !(opts.conv_tol > 0.0) || opts.max_iter == 0 {
        return Err(MklError::InvalidParameter("conv_tol must be positive and max_iter at least 1".into()));
    }
    for k in stack.kernels() {
        k.ensure_symmetric()?;
    }
    Ok(())
}

fn base_model(stack: &KernelStack, targets: &Targets, kind: ModelKind, mu: f64, c: f64) -> MklModel {
    MklModel {
        task: targets.task,
        kind,
        mu,
        c,
        group_names: stack.group_names().to_vec(),
        beta: Vec::new(),
        sample_ids: stack.row_ids().to_vec(),
        alpha: Vec::new(),
        labels: (targets.task == Task::Classification).then(|| targets.values.clone()),
        bias: 0.0,
        iterations: 0,
        converged: false,
        degenerate: false,
        kernel_kind: KernelKind::Precomputed,
        preprocessing: None,
        class_names: None,
        primal: None,
    }
}

/// Alternating elastic-net MKL for either task, with the per-iteration trace.
pub fn train_enmkl(stack: &KernelStack, targets: &Targets, opts: &MklOptions) -> Result<TrainRun> {
    check_mu(opts.mu)?;
    validate_inputs(stack, targets, opts)?;
    let labels = (targets.task == Task::Classification).then_some(targets.values.as_slice());
    let m = stack.len();
    let uniform = vec![1.0 / m as f64; m];
    let mut beta = uniform.clone();
    let mut warm: Option<Vec<f64>> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut last: Option<InnerSolution> = None;

    for _ in 0..opts.max_iter {
        let k = weighted_sum_dropping(stack, &beta, 0.0);
        let sol = inner_solve(&k, targets, opts, warm.as_deref())?;
        let w_norms = compute_block_norms(stack, &sol.alpha, labels, &beta)?;
        let f = predict(&sol.alpha, labels, sol.bias, &k)?;
        let loss = data_loss(targets.task, &targets.values, &f, opts.c);
        // ‖w_j‖²/β_j is the elastic-net penalty term for the λ that produced β
        let penalty: f64 = w_norms
            .iter()
            .zip(&beta)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, b)| w * w / b)
            .sum();
        let objective = 0.5 * penalty + loss;
        let block_norm_objective = block_norm_objective(&w_norms, opts.mu, loss);

        if w_norms.iter().all(|&w| w == 0.0) {
            trace.push(IterationRecord {
                beta: beta.clone(),
                w_norms,
                lambda: Vec::new(),
                objective,
                block_norm_objective,
                inner_iterations: sol.iterations,
            });
            let sol = if beta == uniform {
                sol
            } else {
                let k = weighted_sum_dropping(stack, &uniform, 0.0);
                inner_solve(&k, targets, opts, None)?
            };
            let mut model = base_model(stack, targets, ModelKind::Enmkl, opts.mu, opts.c);
            model.beta = uniform;
            model.alpha = sol.alpha;
            model.bias = sol.bias;
            model.iterations = trace.len();
            model.degenerate = true;
            return Ok(TrainRun { model, trace });
        }

        let lambda = update_lambda(&w_norms, opts.mu)?;
        let mut next = update_beta(&lambda, opts.mu)?;
        for b in next.iter_mut() {
            if *b < KERNEL_DROP_THRESHOLD {
                *b = 0.0;
            }
        }
        let delta = unit_sum(&next)
            .iter()
            .zip(unit_sum(&beta))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        trace.push(IterationRecord {
            beta: beta.clone(),
            w_norms,
            lambda,
            objective,
            block_norm_objective,
            inner_iterations: sol.iterations,
        });
        beta = next;
        warm = Some(sol.alpha.clone());
        last = Some(sol);
        if delta <= opts.conv_tol {
            converged = true;
            break;
        }
    }

    let sol = last.expect("at least one outer iteration runs");
    let scale: f64 = beta.iter().sum();
    let mut model = base_model(stack, targets, ModelKind::Enmkl, opts.mu, opts.c);
    model.alpha = sol.alpha.iter().map(|a| a * scale).collect();
    model.beta = beta.iter().map(|b| b / scale).collect();
    model.bias = sol.bias;
    model.iterations = trace.len();
    model.converged = converged;
    Ok(TrainRun { model, trace })
}

/// ENMKL-SVM with the default SMO settings.
pub fn train_enmkl_svm(
    stack: &KernelStack,
    labels: &[f64],
    c: f64,
    mu: f64,
    conv_tol: f64,
    max_iter: usize,
) -> Result<MklModel> {
    let targets = Targets::labels(labels.to_vec())?;
    let opts = MklOptions {
        conv_tol,
        max_iter,
        ..MklOptions::new(c, mu)
    };
    Ok(train_enmkl(stack, &targets, &opts)?.model)
}

/// ENMKL-KRR.
pub fn train_enmkl_krr(
    stack: &KernelStack,
    targets: &[f64],
    c: f64,
    mu: f64,
    conv_tol: f64,
    max_iter: usize,
) -> Result<MklModel> {
    let targets = Targets::regression(targets.to_vec())?;
    let opts = MklOptions {
        conv_tol,
        max_iter,
        ..MklOptions::new(c, mu)
    };
    Ok(train_enmkl(stack, &targets, &opts)?.model)
}

/// Plain SVM/KRR on the unweighted kernel average (`β_j = 1/m`).
pub fn train_sum_baseline(stack: &KernelStack, targets: &Targets, c: f64, smo: SmoOptions) -> Result<MklModel> {
    let opts = MklOptions {
        smo,
        ..MklOptions::new(c, 1.0)
    };
    validate_inputs(stack, targets, &opts)?;
    let m = stack.len();
    let beta = vec![1.0 / m as f64; m];
    let k = weighted_sum_dropping(stack, &beta, 0.0);
    let sol = inner_solve(&k, targets, &opts, None)?;
    let mut model = base_model(stack, targets, ModelKind::SumBaseline, 0.0, c);
    model.beta = beta;
    model.alpha = sol.alpha;
    model.bias = sol.bias;
    model.iterations = 1;
    model.converged = true;
    Ok(model)
}

/// Fits preprocessing on raw training kernels, trains the requested model on
/// the processed stack and stores the fitted statistics in the model.
pub fn train_model(raw: &KernelStack, targets: &Targets, kind: ModelKind, opts: &MklOptions, preprocessing: Preprocessing) -> Result<MklModel> {
    let (processed, fitted) = FittedPreprocessing::fit(raw, preprocessing)?;
    let mut model = match kind {
        ModelKind::Enmkl => train_enmkl(&processed, targets, opts)?.model,
        ModelKind::SumBaseline => train_sum_baseline(&processed, targets, opts.c, opts.smo)?,
    };
    model.preprocessing = Some(fitted);
    Ok(model)
}

/// Trains on linear kernels of `data` (which must carry targets) and attaches
/// the recovered primal weights.
pub fn train_on_features(data: &GroupedDataset, kind: ModelKind, opts: &MklOptions, preprocessing: Preprocessing) -> Result<MklModel> {
    let targets = data
        .targets()
        .ok_or_else(|| MklError::InvalidParameter("training needs targets".into()))?;
    let raw = build_linear_kernels(data)?;
    let mut model = train_model(&raw, targets, kind, opts, preprocessing)?;
    model.kernel_kind = KernelKind::Linear;
    model.primal = Some(recover_primal_weights(&model, data)?);
    Ok(model)
}

/// Centers (by training means) and optionally unit-normalizes one group slice
/// of a sample. Returns `None` for a zero-norm slice under normalization.
fn transform_slice(x: impl Iterator<Item = f64>, means: &[f64], normalize: bool) -> Option<Vec<f64>> {
    let v: Vec<f64> = x.zip(means).map(|(x, m)| x - m).collect();
    if !normalize {
        return Some(v);
    }
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (norm > 0.0).then(|| v.iter().map(|a| a / norm).collect())
}

/// Recovers `w_j = β_j Σ_i q_i x̃_ij` for a model trained on linear kernels of `data`.
pub fn recover_primal_weights(model: &MklModel, data: &GroupedDataset) -> Result<PrimalWeights> {
    if model.kernel_kind != KernelKind::Linear {
        return Err(MklError::Unsupported(
            "primal weights can only be recovered for linear kernels".into(),
        ));
    }
    if data.sample_ids() != model.sample_ids.as_slice() {
        return Err(MklError::IdMismatch("primal recovery needs the model's training samples in order".into()));
    }
    if data.group_names() != model.group_names.as_slice() {
        return Err(MklError::IdMismatch("dataset groups differ from the model's kernels".into()));
    }
    let config = model.preprocessing.as_ref().map(|p| p.config).unwrap_or(Preprocessing {
        center: false,
        normalize: false,
    });
    let q = dual_coefficients(&model.alpha, model.labels.as_deref());
    let n = data.nsamples();
    let groups = (0..data.ngroups())
        .into_par_iter()
        .map(|j| {
            let cols = data.group_columns(j);
            let x = data.group_features(j);
            let means: Vec<f64> = if config.center {
                (0..cols.len()).map(|c| x.column(c).sum() / n as f64).collect()
            } else {
                vec![0.0; cols.len()]
            };
            let mut w = vec![0.0; cols.len()];
            for i in 0..n {
                if q[i] == 0.0 {
                    continue;
                }
                let xt = transform_slice(x.row(i).iter().copied(), &means, config.normalize)
                    .ok_or_else(|| MklError::ZeroNorm(data.sample_ids()[i].clone()))?;
                for (wc, xc) in w.iter_mut().zip(&xt) {
                    *wc += q[i] * xc;
                }
            }
            let b = model.beta[j];
            Ok(GroupPrimal {
                group: data.group_names()[j].clone(),
                feature_names: cols.iter().map(|&c| data.feature_names()[c].clone()).collect(),
                feature_means: means,
                weights: w.into_iter().map(|v| v * b).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrimalWeights {
        groups,
        bias: model.bias,
        normalize: config.normalize,
    })
}

impl PrimalWeights {
    pub fn block_norms(&self) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| g.weights.iter().map(|w| w * w).sum::<f64>().sqrt())
            .collect()
    }

    /// Primal predictions for raw test features laid out with the same group map.
    pub fn predict(&self, data: &GroupedDataset) -> Result<Vec<f64>> {
        if data.group_names().len() != self.groups.len() {
            return Err(MklError::Dimension("test data group count differs from the model".into()));
        }
        let cols: Vec<Vec<usize>> = (0..self.groups.len()).map(|j| data.group_columns(j)).collect();
        for (g, c) in self.groups.iter().zip(&cols) {
            if g.weights.len() != c.len() {
                return Err(MklError::Dimension(format!("group `{}` has a different feature count", g.group)));
            }
        }
        let x = data.features();
        (0..data.nsamples())
            .map(|i| {
                let mut f = self.bias;
                for (g, c) in self.groups.iter().zip(&cols) {
                    let xt = transform_slice(c.iter().map(|&col| x[(i, col)]), &g.feature_means, self.normalize)
                        .ok_or_else(|| MklError::ZeroNorm(data.sample_ids()[i].clone()))?;
                    f += g.weights.iter().zip(&xt).map(|(w, v)| w * v).sum::<f64>();
                }
                Ok(f)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn k(rows: &[Vec<f64>]) -> KernelMatrix {
        KernelMatrix::from_rows(rows).unwrap()
    }

    fn small_stack() -> (KernelStack, Vec<f64>) {
        let k1 = k(&[
            vec![1.0, 0.8, -0.2, -0.5],
            vec![0.8, 1.0, -0.1, -0.6],
            vec![-0.2, -0.1, 1.0, 0.7],
            vec![-0.5, -0.6, 0.7, 1.0],
        ]);
        let k2 = k(&[
            vec![1.0, 0.1, 0.3, 0.0],
            vec![0.1, 1.0, 0.2, 0.4],
            vec![0.3, 0.2, 1.0, 0.1],
            vec![0.0, 0.4, 0.1, 1.0],
        ]);
        (KernelStack::from_kernels(vec![k1, k2]).unwrap(), vec![1.0, 1.0, -1.0, -1.0])
    }

    #[test]
    fn block_norm_examples() {
        let s = KernelStack::from_kernels(vec![k(&[vec![4.0]])]).unwrap();
        let w = compute_block_norms(&s, &[1.0], Some(&[1.0]), &[0.5]).unwrap();
        assert_eq!(w, vec![1.0]);

        let (s, y) = small_stack();
        let w = compute_block_norms(&s, &[0.0; 4], Some(&y), &[0.5, 0.5]).unwrap();
        assert_eq!(w, vec![0.0, 0.0]);

        let single = KernelStack::from_kernels(vec![s.kernel(0).clone()]).unwrap();
        let alpha = [0.3, 0.1, 0.2, 0.2];
        let w = compute_block_norms(&single, &alpha, Some(&y), &[1.0]).unwrap();
        let q: Vec<f64> = alpha.iter().zip(&y).map(|(a, y)| a * y).collect();
        assert_abs_diff_eq!(w[0] * w[0], quadratic_form(s.kernel(0), &q), epsilon = 1e-15);
    }

    #[test]
    fn block_norms_reject_indefinite_kernel() {
        let s = KernelStack::from_kernels(vec![k(&[vec![0.0, 1.0], vec![1.0, 0.0]])]).unwrap();
        let r = compute_block_norms(&s, &[1.0, 1.0], Some(&[1.0, -1.0]), &[1.0]);
        assert!(matches!(r, Err(MklError::NotPsd { .. })));
    }

    #[test]
    fn lambda_examples() {
        let l = update_lambda(&[2.0; 4], 0.25).unwrap();
        assert!(l.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert_eq!(update_lambda(&[3.0, 1.0], 1.0).unwrap(), vec![0.75, 0.25]);
        assert_eq!(update_lambda(&[0.0, 1.0], 0.5).unwrap()[0], 0.0);
        assert!(update_lambda(&[0.0, 0.0], 0.5).is_err());
        assert!(update_lambda(&[1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn beta_examples() {
        let l = [0.2, 0.7, 0.1];
        assert_eq!(update_beta(&l, 1.0).unwrap(), l.to_vec());
        assert_abs_diff_eq!(update_beta(&[0.5], 0.25).unwrap()[0], 1.0 / 1.75, epsilon = 1e-15);
        assert_eq!(update_beta(&[0.0], 0.4).unwrap()[0], 0.0);
    }

    #[test]
    fn selected_count_examples() {
        assert_eq!(selected_kernel_count(&[1.0, 0.0, 0.0], SELECTION_THRESHOLD), 1);
        assert_eq!(selected_kernel_count(&[1.0 / 116.0; 116], SELECTION_THRESHOLD), 116);
    }

    #[test]
    fn single_kernel_equals_plain_svm() {
        let (s, y) = small_stack();
        let single = KernelStack::from_kernels(vec![s.kernel(0).clone()]).unwrap();
        let model = train_enmkl_svm(&single, &y, 1.0, 0.5, 1e-4, 50).unwrap();
        assert_eq!(model.beta, vec![1.0]);
        let plain = crate::solvers::solve_svm_dual(s.kernel(0), &y, 1.0, 1e-3).unwrap();
        for (a, b) in model.alpha.iter().zip(&plain.alpha) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(model.bias, plain.bias);
        assert!(model.converged);
    }

    #[test]
    fn duplicated_kernels_keep_equal_weights() {
        let (s, y) = small_stack();
        let dup = KernelStack::from_kernels(vec![s.kernel(0).clone(), s.kernel(0).clone()]).unwrap();
        let targets = Targets::labels(y).unwrap();
        let run = train_enmkl(&dup, &targets, &MklOptions::new(1.0, 0.3)).unwrap();
        for rec in &run.trace {
            assert_eq!(rec.beta[0], rec.beta[1]);
        }
        assert_eq!(run.model.beta, vec![0.5, 0.5]);
    }

    #[test]
    fn krr_single_kernel_equals_plain_krr() {
        let (s, _) = small_stack();
        let y = [0.5, 1.5, -0.3, 2.0];
        let single = KernelStack::from_kernels(vec![s.kernel(1).clone()]).unwrap();
        let model = train_enmkl_krr(&single, &y, 2.0, 0.7, 1e-4, 50).unwrap();
        let plain = solve_krr_dual(s.kernel(1), &y, 2.0).unwrap();
        assert_eq!(model.beta, vec![1.0]);
        for (a, b) in model.alpha.iter().zip(&plain.alpha) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(model.bias, plain.target_offset);
    }

    #[test]
    fn mu_zero_is_rejected_with_baseline_hint() {
        let (s, y) = small_stack();
        let err = train_enmkl_svm(&s, &y, 1.0, 0.0, 1e-4, 10).unwrap_err();
        assert!(err.to_string().contains("sum-baseline"));
    }

    #[test]
    fn tiny_c_is_degenerate() {
        let (s, y) = small_stack();
        let targets = Targets::labels(y).unwrap();
        let opts = MklOptions::new(1e-300, 0.5);
        let run = train_enmkl(&s, &targets, &opts).unwrap();
        assert!(run.model.degenerate);
        assert!(!run.model.converged);
        assert_eq!(run.model.beta, vec![0.5, 0.5]);
    }

    #[test]
    fn rescaling_preserves_decision_values() {
        let (s, y) = small_stack();
        let targets = Targets::labels(y.clone()).unwrap();
        let run = train_enmkl(&s, &targets, &MklOptions::new(1.0, 0.6)).unwrap();
        let m = &run.model;
        let raw_beta = &run.trace.last().unwrap().beta;
        assert_abs_diff_eq!(m.beta.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        // reconstruct the pre-normalization pair from the final update
        let lambda = &run.trace.last().unwrap().lambda;
        let beta_raw = update_beta(lambda, 0.6).unwrap();
        let sum: f64 = beta_raw.iter().sum();
        let alpha_raw: Vec<f64> = m.alpha.iter().map(|a| a / sum).collect();
        let f_raw = predict(&alpha_raw, Some(&y), m.bias, &weighted_sum_dropping(&s, &beta_raw, 0.0)).unwrap();
        let f_model = m.decision_values(&s).unwrap();
        for (a, b) in f_raw.iter().zip(&f_model) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(raw_beta.len(), 2);
    }

    proptest! {
        #[test]
        fn lambda_beta_identities(norms in prop::collection::vec(0.0f64..10.0, 1..12), mu in 0.01f64..=1.0) {
            prop_assume!(norms.iter().sum::<f64>() > 1e-6);
            let l = update_lambda(&norms, mu).unwrap();
            let s: f64 = l.iter().map(|v| mu.sqrt() * v).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            let b = update_beta(&l, mu).unwrap();
            prop_assert!(b.iter().all(|&v| v >= 0.0));
            let l1 = update_lambda(&norms, 1.0).unwrap();
            prop_assert_eq!(update_beta(&l1, 1.0).unwrap(), l1);
        }

        #[test]
        fn zero_weight_is_a_fixed_point(norms in prop::collection::vec(0.1f64..10.0, 2..8), mu in 0.05f64..=1.0) {
            let mut norms = norms;
            norms[0] = 0.0;
            let b = update_beta(&update_lambda(&norms, mu).unwrap(), mu).unwrap();
            prop_assert_eq!(b[0], 0.0);
        }
    }
}
