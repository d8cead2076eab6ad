//! Single-kernel inner solvers.
//!
//! The SVM dual is solved by SMO with second-order working-pair selection
//! over a fully materialized kernel. The KRR dual reduces to one symmetric
//! positive-definite linear system.

use nalgebra::{DMatrix, DVector};

use crate::error::{MklError, Result};
use crate::kernel::KernelMatrix;
use crate::task::check_labels;

/// Default SMO stopping tolerance on the maximal KKT violation gap.
pub const DEFAULT_SMO_TOL: f64 = 1e-3;
/// Hard cap on pair updates before reporting non-convergence.
pub const DEFAULT_SMO_MAX_ITER: u64 = 10_000_000;

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoOptions {
    pub tol: f64,
    pub max_iter: u64,
}

impl Default for SmoOptions {
    fn default() -> Self {
        SmoOptions {
            tol: DEFAULT_SMO_TOL,
            max_iter: DEFAULT_SMO_MAX_ITER,
        }
    }
}

impl SmoOptions {
    pub fn with_tol(tol: f64) -> Self {
        SmoOptions {
            tol,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmDualSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    /// Dual objective `Σα − ½ αᵀQα` (maximization form).
    pub objective: f64,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrrDualSolution {
    pub alpha: Vec<f64>,
    pub target_offset: f64,
}

/// Ridge added to the kernel diagonal: `n / (2C)`.
pub fn krr_ridge(n: usize, c: f64) -> f64 {
    n as f64 / (2.0 * c)
}

fn check_c(c: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(MklError::InvalidParameter(format!("C must be positive and finite, got {c}")));
    }
    Ok(())
}

/// Solves the C-SVC dual on a precomputed train kernel.
pub fn solve_svm_dual(k: &KernelMatrix, y: &[f64], c: f64, tol: f64) -> Result<SvmDualSolution> {
    solve_svm_dual_with(k, y, c, SmoOptions::with_tol(tol), None)
}

/// SMO with explicit options and an optional feasible warm start.
pub fn solve_svm_dual_with(
    k: &KernelMatrix,
    y: &[f64],
    c: f64,
    opts: SmoOptions,
    warm_start: Option<&[f64]>,
) -> Result<SvmDualSolution> {
    k.ensure_symmetric()?;
    check_c(c)?;
    if y.len() != k.nrows() {
        return Err(MklError::Dimension(format!("{} labels for a {}x{} kernel", y.len(), k.nrows(), k.ncols())));
    }
    check_labels(y)?;
    if !(opts.tol > 0.0) {
        return Err(MklError::InvalidParameter("SMO tolerance must be positive".into()));
    }
    let alpha = match warm_start {
        Some(a) if is_feasible(a, y, c) => a.to_vec(),
        _ => vec![0.0; y.len()],
    };
    Smo::new(k.values(), y, c, alpha).run(opts)
}

fn is_feasible(alpha: &[f64], y: &[f64], c: f64) -> bool {
    alpha.len() == y.len()
        && alpha.iter().all(|&a| (0.0..=c).contains(&a))
        && alpha.iter().zip(y).map(|(a, y)| a * y).sum::<f64>().abs() <= 1e-10 * (1.0 + c)
}

struct Smo<'a> {
    k: &'a DMatrix<f64>,
    y: &'a [f64],
    c: f64,
    alpha: Vec<f64>,
    grad: Vec<f64>,
}

impl<'a> Smo<'a> {
    fn new(k: &'a DMatrix<f64>, y: &'a [f64], c: f64, alpha: Vec<f64>) -> Self {
        let n = y.len();
        let mut grad = vec![-1.0; n];
        for (j, &aj) in alpha.iter().enumerate() {
            if aj != 0.0 {
                for (i, g) in grad.iter_mut().enumerate() {
                    *g += y[i] * y[j] * k[(i, j)] * aj;
                }
            }
        }
        Smo { k, y, c, alpha, grad }
    }

    #[inline]
    fn q(&self, i: usize, j: usize) -> f64 {
        self.y[i] * self.y[j] * self.k[(i, j)]
    }

    /// Second-order working pair, or `None` once the KKT gap is below `tol`.
    fn select_pair(&self, tol: f64) -> Option<(usize, usize)> {
        let n = self.y.len();
        let mut gmax = f64::NEG_INFINITY;
        let mut gmax2 = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let cand = if self.y[t] > 0.0 {
                (self.alpha[t] < self.c).then(|| -self.grad[t])
            } else {
                (self.alpha[t] > 0.0).then(|| self.grad[t])
            };
            if let Some(v) = cand {
                if v >= gmax {
                    gmax = v;
                    i_sel = Some(t);
                }
            }
        }
        let i = i_sel?;
        let qii = self.q(i, i);
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        for t in 0..n {
            let (in_low, g) = if self.y[t] > 0.0 {
                (self.alpha[t] > 0.0, self.grad[t])
            } else {
                (self.alpha[t] < self.c, -self.grad[t])
            };
            if !in_low {
                continue;
            }
            gmax2 = gmax2.max(g);
            let grad_diff = gmax + g;
            if grad_diff > 0.0 {
                let mut quad = qii + self.q(t, t) - 2.0 * self.y[i] * self.y[t] * self.q(i, t);
                if quad <= 0.0 {
                    quad = TAU;
                }
                let obj_diff = -(grad_diff * grad_diff) / quad;
                if obj_diff <= best {
                    best = obj_diff;
                    j_sel = Some(t);
                }
            }
        }
        if gmax + gmax2 < tol {
            return None;
        }
        j_sel.map(|j| (i, j))
    }

    fn update_pair(&mut self, i: usize, j: usize) {
        let c = self.c;
        let (old_i, old_j) = (self.alpha[i], self.alpha[j]);
        let (qii, qjj, qij) = (self.q(i, i), self.q(j, j), self.q(i, j));
        let (mut ai, mut aj) = (old_i, old_j);
        if self.y[i] != self.y[j] {
            let mut quad = qii + qjj + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-self.grad[i] - self.grad[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let mut quad = qii + qjj - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (self.grad[i] - self.grad[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        self.alpha[i] = ai;
        self.alpha[j] = aj;
        let (di, dj) = (ai - old_i, aj - old_j);
        for t in 0..self.y.len() {
            self.grad[t] += self.q(i, t) * di + self.q(j, t) * dj;
        }
    }

    /// Bias from free support vectors, else the midpoint of the feasible interval.
    fn bias(&self) -> f64 {
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut sum_free, mut nr_free) = (0.0, 0usize);
        for t in 0..self.y.len() {
            let yg = self.y[t] * self.grad[t];
            if self.alpha[t] >= self.c {
                if self.y[t] < 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else if self.alpha[t] <= 0.0 {
                if self.y[t] > 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                nr_free += 1;
                sum_free += yg;
            }
        }
        let rho = if nr_free > 0 {
            sum_free / nr_free as f64
        } else {
            (ub + lb) / 2.0
        };
        -rho
    }

    fn run(mut self, opts: SmoOptions) -> Result<SvmDualSolution> {
        let mut iterations = 0u64;
        while let Some((i, j)) = self.select_pair(opts.tol) {
            if iterations >= opts.max_iter {
                return Err(MklError::NonConvergence { iterations });
            }
            self.update_pair(i, j);
            iterations += 1;
        }
        let half_quad_minus_lin: f64 = self
            .alpha
            .iter()
            .zip(&self.grad)
            .map(|(a, g)| 0.5 * a * (g - 1.0))
            .sum();
        let bias = self.bias();
        Ok(SvmDualSolution {
            alpha: self.alpha,
            bias,
            objective: -half_quad_minus_lin,
            iterations,
        })
    }
}

/// Solves `(K + n/(2C)·I) α = y − mean(y)`.
pub fn solve_krr_dual(k: &KernelMatrix, y: &[f64], c: f64) -> Result<KrrDualSolution> {
    k.ensure_symmetric()?;
    check_c(c)?;
    let n = k.nrows();
    if y.len() != n {
        return Err(MklError::Dimension(format!("{} targets for a {n}x{n} kernel", y.len())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(MklError::NonFinite("regression targets"));
    }
    let offset = y.iter().sum::<f64>() / n as f64;
    let rhs = DVector::from_iterator(n, y.iter().map(|v| v - offset));
    let mut a = k.values().clone();
    let ridge = krr_ridge(n, c);
    for i in 0..n {
        a[(i, i)] += ridge;
    }
    let mut alpha = spd_solve(&a, &rhs)?;
    // one step of iterative refinement
    let resid = &rhs - &a * &alpha;
    alpha += spd_solve(&a, &resid)?;
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(MklError::NonFinite("KRR solution"));
    }
    Ok(KrrDualSolution {
        alpha: alpha.as_slice().to_vec(),
        target_offset: offset,
    })
}

/// Cholesky solve, falling back to an SVD least-squares solve when the
/// factorization fails under severe ill-conditioning.
fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone()
        .svd(true, true)
        .solve(b, f64::EPSILON * a.amax() * a.nrows() as f64)
        .map_err(|e| MklError::InvalidParameter(format!("least-squares fallback failed: {e}")))
}

/// Kernel expansion `Σ_i q_i K(x, x_i) + bias` where `q_i = α_i y_i` when
/// labels are given (SVM) and `q_i = α_i` otherwise (KRR).
pub fn predict(alpha: &[f64], labels: Option<&[f64]>, bias: f64, k_cross: &KernelMatrix) -> Result<Vec<f64>> {
    let n = k_cross.ncols();
    if alpha.len() != n {
        return Err(MklError::Dimension(format!("{} dual weights for {n} training columns", alpha.len())));
    }
    let q: Vec<f64> = match labels {
        Some(y) if y.len() != n => {
            return Err(MklError::Dimension(format!("{} labels for {n} training columns", y.len())));
        }
        Some(y) => alpha.iter().zip(y).map(|(a, y)| a * y).collect(),
        None => alpha.to_vec(),
    };
    let k = k_cross.values();
    Ok((0..k_cross.nrows())
        .map(|r| (0..n).map(|i| k[(r, i)] * q[i]).sum::<f64>() + bias)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn eye2() -> KernelMatrix {
        KernelMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    #[test]
    fn two_point_unclipped() {
        let s = solve_svm_dual(&eye2(), &[1.0, -1.0], 10.0, 1e-8).unwrap();
        assert_abs_diff_eq!(s.alpha[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.alpha[1], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.bias, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.objective, 1.0, epsilon = 1e-9);
        let f = predict(&s.alpha, Some(&[1.0, -1.0]), s.bias, &eye2()).unwrap();
        assert_abs_diff_eq!(f[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(f[1], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn two_point_clipped() {
        let s = solve_svm_dual(&eye2(), &[1.0, -1.0], 0.5, 1e-8).unwrap();
        assert_eq!(s.alpha, vec![0.5, 0.5]);
        assert_abs_diff_eq!(s.bias, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn tiny_c_collapses_box() {
        let k = KernelMatrix::from_rows(&[vec![2.0, 0.5, 0.1], vec![0.5, 1.0, 0.3], vec![0.1, 0.3, 1.5]]).unwrap();
        let s = solve_svm_dual(&k, &[1.0, -1.0, 1.0], 1e-12, 1e-3).unwrap();
        assert!(s.alpha.iter().all(|&a| a <= 1e-12));
    }

    #[test]
    fn svm_rejects_bad_input() {
        assert!(matches!(
            solve_svm_dual(&eye2(), &[1.0, 1.0], 1.0, 1e-3),
            Err(MklError::InvalidLabels(_))
        ));
        let asym = KernelMatrix::from_rows(&[vec![1.0, 0.2], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            solve_svm_dual(&asym, &[1.0, -1.0], 1.0, 1e-3),
            Err(MklError::NotSymmetric { .. })
        ));
        assert!(solve_svm_dual(&eye2(), &[1.0, -1.0], 0.0, 1e-3).is_err());
    }

    #[test]
    fn iteration_cap_is_an_error() {
        let k = KernelMatrix::from_rows(&[vec![1.0, 0.1, 0.2], vec![0.1, 1.0, 0.3], vec![0.2, 0.3, 1.0]]).unwrap();
        let opts = SmoOptions { tol: 1e-12, max_iter: 0 };
        let r = solve_svm_dual_with(&k, &[1.0, -1.0, 1.0], 1.0, opts, None);
        assert!(matches!(r, Err(MklError::NonConvergence { .. })));
    }

    #[test]
    fn warm_start_reaches_same_optimum() {
        let k = KernelMatrix::from_rows(&[
            vec![2.0, 0.5, 0.1, 0.2],
            vec![0.5, 1.0, 0.3, -0.1],
            vec![0.1, 0.3, 1.5, 0.4],
            vec![0.2, -0.1, 0.4, 1.2],
        ])
        .unwrap();
        let y = [1.0, -1.0, 1.0, -1.0];
        let cold = solve_svm_dual(&k, &y, 1.0, 1e-10).unwrap();
        let opts = SmoOptions::with_tol(1e-10);
        let warm = solve_svm_dual_with(&k, &y, 1.0, opts, Some(&[0.3, 0.3, 0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(cold.objective, warm.objective, epsilon = 1e-9);
    }

    #[test]
    fn krr_identity_kernel() {
        let s = solve_krr_dual(&eye2(), &[1.0, -1.0], 1.0).unwrap();
        assert_abs_diff_eq!(s.alpha[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha[1], -0.5, epsilon = 1e-15);
        assert_eq!(s.target_offset, 0.0);
    }

    #[test]
    fn krr_constant_targets() {
        let s = solve_krr_dual(&eye2(), &[3.0, 3.0], 2.0).unwrap();
        assert!(s.alpha.iter().all(|&a| a == 0.0));
        let f = predict(&s.alpha, None, s.target_offset, &eye2()).unwrap();
        assert_eq!(f, vec![3.0, 3.0]);
    }

    #[test]
    fn predict_constant_bias() {
        let f = predict(&[0.0, 0.0], None, 0.7, &eye2()).unwrap();
        assert_eq!(f, vec![0.7, 0.7]);
        assert!(predict(&[0.0], None, 0.7, &eye2()).is_err());
    }
}
